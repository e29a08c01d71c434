"""Synthetic scenes and direct gradient descent on a raw prediction tensor.

No network is involved: the (A, 5 + C) prediction array itself is the
parameter being optimized through assign -> targets -> loss.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

from .assigner import (
    BACKGROUND,
    AssignerConfig,
    Assignment,
    center_mask_matrix,
    cost_matrix,
    multi_positive_assign,
    one_to_one_assign,
    simota_assign,
    single_center_assign,
)
from .augment import Scene
from .evalmap import MapReport, mean_ap
from .geometry import BBox, LabeledBox, iou, pairwise_iou
from .gridhead import (CLS_START, OBJ_INDEX, AnchorGrid, DecodedBatch, FpnSpec, build_anchors, decode_boxes,
                       encode_boxes)
from .losses import LossBreakdown, LossWeights, NumericFailure, build_targets, total_loss
from .postprocess import Detection, decode_nmsfree, decode_with_nms
from .rng import SplitMix64

ASSIGNERS = ("single_center", "multi3x3", "simota", "one_to_one")
BACKGROUND_LOGIT = -4.0
# prior centers stay within this fraction of the gt side from the gt center
PRIOR_SLACK = 0.1

# flat background plus one fill color per class
BACKGROUND_RGB = (40, 40, 40)
CLASS_RGB = [(230, 60, 60), (60, 200, 80), (70, 110, 240), (240, 200, 50), (200, 80, 220),
             (60, 210, 220), (250, 140, 40), (150, 150, 150)]


@dataclass(frozen=True)
class FitConfig:
    steps: int = 500
    step_size: float = 0.3
    assigner: Literal["single_center", "multi3x3", "simota", "one_to_one"] = "simota"
    reassign_every: int = 10
    init_noise: float = 0.1
    seed: int = 0
    # classification/objectness logits move logit_step_scale times faster than box offsets
    logit_step_scale: float = 300.0
    # decay applied to the box step only; logits keep a constant step so late
    # reassignments can still be absorbed
    schedule: Literal["constant", "cosine"] = "cosine"
    loss_threshold: float = 0.05
    score_threshold: float = 0.01
    nms_threshold: float = 0.65

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size < 0:
            raise ValueError("step_size must be >= 0")
        if self.reassign_every < 1:
            raise ValueError("reassign_every must be >= 1")
        if self.assigner not in ASSIGNERS:
            raise ValueError(f"unknown assigner {self.assigner!r}; choose from {ASSIGNERS}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.logit_step_scale <= 0:
            raise ValueError("logit_step_scale must be > 0")


@dataclass
class FitTrace:
    losses: list[LossBreakdown]
    detections: list[Detection]
    report: MapReport
    final_preds: np.ndarray = field(repr=False)
    assignment: Assignment = field(repr=False)
    steps_to_threshold: Optional[int] = None
    reassign_changes: list[int] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.losses[-1].total

    @property
    def ap50(self) -> float:
        return self.report.ap50

    def summary(self) -> dict:
        return {
            "steps": len(self.losses),
            "final_loss": self.losses[-1].as_dict(),
            "steps_to_threshold": self.steps_to_threshold,
            "map": self.report.to_json(),
            "num_detections": len(self.detections),
            "reassign_changes": self.reassign_changes,
        }


def make_scene(seed: int, n_objects: int, size: int = 128, num_classes: int = 3,
               max_pair_iou: float = 0.5) -> Scene:
    """Flat background with solid rectangles, one per gt.

    Sides are uniform in [8, size/2], centers at least 4 px inside the canvas.
    Boxes overlapping an earlier one by more than ``max_pair_iou`` are redrawn
    (up to 100 tries each).
    """
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    if size < 32:
        raise ValueError("size must be >= 32")
    rng = SplitMix64(seed).child("scene")
    image = np.empty((size, size, 3), dtype=np.uint8)
    image[:] = BACKGROUND_RGB
    gts: list[LabeledBox] = []
    for _ in range(n_objects):
        for _attempt in range(100):
            w = rng.uniform(8.0, size / 2)
            h = rng.uniform(8.0, size / 2)
            cx = rng.uniform(4.0, size - 4.0)
            cy = rng.uniform(4.0, size - 4.0)
            box = BBox(cx, cy, w, h)
            if all(iou(box, g.box) <= max_pair_iou for g in gts):
                break
        gts.append(LabeledBox(box, rng.randint(0, num_classes - 1)))
    for g in gts:
        x1, y1 = max(int(round(g.box.x1)), 0), max(int(round(g.box.y1)), 0)
        x2, y2 = min(int(round(g.box.x2)), size), min(int(round(g.box.y2)), size)
        image[y1:y2, x1:x2] = CLASS_RGB[g.class_id % len(CLASS_RGB)]
    return Scene(image, tuple(gts), f"synth-{seed}")


def init_predictions(scene: Scene, anchors: AnchorGrid, num_classes: int, init_noise: float,
                     seed: int) -> np.ndarray:
    """Starting point for the fit.

    Anchors within 2.5 strides of a gt center start from a gt-sized prior box
    whose center is the anchor's cell center clamped to within PRIOR_SLACK of
    a side from the gt center (so the prior always overlaps it), with neutral
    logits. When several gts qualify the
    nearest center wins. Everything else starts as a cell-sized box with
    logits at -4. Gaussian noise of scale init_noise is added to the
    near-object rows.
    """
    a = len(anchors)
    preds = np.zeros((a, CLS_START + num_classes))
    preds[:, :2] = 0.5
    preds[:, OBJ_INDEX:] = BACKGROUND_LOGIT
    if not scene.gts:
        return preds
    near = center_mask_matrix(scene.gts, anchors, AssignerConfig(center_mode="radius", center_radius=2.5))
    centers = anchors.centers
    gt_arr = np.array([g.box.as_array() for g in scene.gts])
    dist = np.hypot(centers[None, :, 0] - gt_arr[:, None, 0], centers[None, :, 1] - gt_arr[:, None, 1])
    dist = np.where(near, dist, np.inf)
    owner = np.argmin(dist, axis=0)
    rows = np.flatnonzero(near.any(axis=0))
    g = gt_arr[owner[rows]]
    cx = np.clip(centers[rows, 0], g[:, 0] - g[:, 2] * PRIOR_SLACK, g[:, 0] + g[:, 2] * PRIOR_SLACK)
    cy = np.clip(centers[rows, 1], g[:, 1] - g[:, 3] * PRIOR_SLACK, g[:, 1] + g[:, 3] * PRIOR_SLACK)
    prior = np.tile([0.0, 0.0, 1.0, 1.0], (a, 1))
    prior[rows] = np.stack([cx, cy, g[:, 2], g[:, 3]], axis=1)
    preds[rows, :4] = encode_boxes(prior, anchors)[rows]
    preds[rows, OBJ_INDEX:] = 0.0
    noise = np.random.default_rng(SplitMix64(seed).child("fit.init").numpy_seed())
    preds[rows] += init_noise * noise.standard_normal((len(rows), preds.shape[1]))
    return preds


def assign(kind: str, preds: np.ndarray, scene: Scene, anchors: AnchorGrid,
           acfg: AssignerConfig = AssignerConfig()) -> Assignment:
    gts = scene.gts
    if kind == "single_center":
        return single_center_assign(gts, anchors)
    if kind == "multi3x3":
        return multi_positive_assign(gts, anchors)
    if not gts:
        return Assignment.from_labels(np.full(len(anchors), BACKGROUND), [])
    cm = cost_matrix(DecodedBatch.from_raw(preds, anchors), gts, anchors, acfg)
    if kind == "simota":
        return simota_assign(cm, acfg)
    if kind == "one_to_one":
        return one_to_one_assign(cm)
    raise ValueError(f"unknown assigner {kind!r}")


def _step_scale(cfg: FitConfig, step: int) -> float:
    if cfg.schedule == "cosine":
        return 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))
    return 1.0


def detect(preds: np.ndarray, anchors: AnchorGrid, cfg: FitConfig) -> list[Detection]:
    if cfg.assigner == "one_to_one":
        return decode_nmsfree(preds, anchors, cfg.score_threshold)
    return decode_with_nms(preds, anchors, cfg.score_threshold, cfg.nms_threshold)


def fit(
    scene: Scene,
    spec: FpnSpec,
    cfg: FitConfig,
    num_classes: int = 3,
    weights: LossWeights = LossWeights(),
    acfg: AssignerConfig = AssignerConfig(),
    preds: Optional[np.ndarray] = None,
) -> FitTrace:
    if (scene.height, scene.width) != spec.input_size:
        raise ValueError(f"scene is {scene.height}x{scene.width}, spec expects {spec.input_size}")
    started = time.perf_counter()
    anchors = build_anchors(spec)
    if preds is None:
        preds = init_predictions(scene, anchors, num_classes, cfg.init_noise, cfg.seed)
    preds = np.array(preds, dtype=np.float64)
    if not np.all(np.isfinite(preds)):
        bad = int(np.flatnonzero(~np.isfinite(preds).all(axis=1))[0])
        raise NumericFailure(f"non-finite initial prediction at anchor {bad}", anchor_index=bad, step=0)
    lr = np.full(preds.shape[1], cfg.step_size)
    lr[OBJ_INDEX:] *= cfg.logit_step_scale

    losses: list[LossBreakdown] = []
    assignment = None
    changes = []
    steps_to_threshold = None
    for step in range(cfg.steps):
        if step % cfg.reassign_every == 0:
            new = assign(cfg.assigner, preds, scene, anchors, acfg)
            if assignment is not None:
                changes.append(int(np.count_nonzero(new.anchor_labels != assignment.anchor_labels)))
            assignment = new
            targets = build_targets(assignment, scene.gts, num_classes)
        try:
            loss, grad = total_loss(preds, anchors, targets, weights)
        except NumericFailure as exc:
            exc.step = step
            raise
        losses.append(loss)
        if steps_to_threshold is None and loss.total < cfg.loss_threshold:
            steps_to_threshold = step + 1
        decay = _step_scale(cfg, step)
        preds[:, :OBJ_INDEX] -= decay * lr[:OBJ_INDEX] * grad[:, :OBJ_INDEX]
        preds[:, OBJ_INDEX:] -= lr[OBJ_INDEX:] * grad[:, OBJ_INDEX:]
        if not np.all(np.isfinite(preds)):
            raise NumericFailure(f"non-finite predictions after step {step}", step=step)

    dets = detect(preds, anchors, cfg)
    report = mean_ap(dets, scene.gts)
    return FitTrace(losses, dets, report, preds, assignment, steps_to_threshold, changes,
                    time.perf_counter() - started)


def positive_ious(trace: FitTrace, scene: Scene, spec: FpnSpec) -> np.ndarray:
    """IoU of each final positive anchor's decoded box with its assigned gt."""
    anchors = build_anchors(spec)
    labels = trace.assignment.anchor_labels
    idx = np.flatnonzero(labels != BACKGROUND)
    if not len(idx):
        return np.zeros(0)
    boxes = decode_boxes(trace.final_preds, anchors)[idx]
    gts = np.array([scene.gts[labels[j]].box.as_array() for j in idx])
    return np.array([pairwise_iou(b, g)[0, 0] for b, g in zip(boxes, gts)])


# -- roadmap -----------------------------------------------------------------

@dataclass(frozen=True)
class RoadmapRow:
    assigner: str
    mean_final_loss: float
    mean_ap50: float
    mean_steps_to_threshold: float  # over runs that reached the threshold; nan if none did
    reached: int
    runs: int

    def as_dict(self) -> dict:
        return {"assigner": self.assigner, "mean_final_loss": self.mean_final_loss, "mean_ap50": self.mean_ap50,
                "mean_steps_to_threshold": self.mean_steps_to_threshold, "reached": self.reached,
                "runs": self.runs}


def _fit_one(job):
    scene, spec, cfg, num_classes, weights, acfg = job
    trace = fit(scene, spec, cfg, num_classes, weights, acfg)
    return {"scene": scene.id, "assigner": cfg.assigner, "final_loss": trace.final_loss, "ap50": trace.ap50,
            "map": trace.report.map, "steps_to_threshold": trace.steps_to_threshold,
            "wall_time": trace.wall_time}


def roadmap_report(
    scenes: Sequence[Scene],
    spec: FpnSpec,
    configs: dict[str, FitConfig],
    num_classes: int = 3,
    weights: LossWeights = LossWeights(),
    acfg: AssignerConfig = AssignerConfig(),
    workers: int = 1,
) -> tuple[list[RoadmapRow], list[dict]]:
    """Fit every scene with every assigner; returns summary rows and per-run records.

    Runs are independent, so ``workers`` > 1 fans them out over processes;
    results do not depend on the worker count.
    """
    jobs = [(s, spec, configs[name], num_classes, weights, acfg) for name in configs for s in scenes]
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_fit_one, jobs))
    else:
        runs = [_fit_one(j) for j in jobs]
    rows = []
    for name in configs:
        mine = [r for r in runs if r["assigner"] == configs[name].assigner]
        reached = [r["steps_to_threshold"] for r in mine if r["steps_to_threshold"] is not None]
        rows.append(RoadmapRow(
            configs[name].assigner,
            float(np.mean([r["final_loss"] for r in mine])) if mine else math.nan,
            float(np.mean([r["ap50"] for r in mine])) if mine else math.nan,
            float(np.mean(reached)) if reached else math.nan,
            len(reached),
            len(mine),
        ))
    return rows, runs
