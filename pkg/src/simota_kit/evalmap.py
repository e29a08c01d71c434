"""All-point interpolated AP / mAP over IoU thresholds, COCO style but simplified."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import LabeledBox, pairwise_iou
from .postprocess import Detection

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    ap: float

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist()))


@dataclass
class MapReport:
    map: float
    ap50: float
    ap75: float
    per_threshold: dict[float, float]
    per_class: dict[int, dict[float, float]]
    curves: dict[tuple[int, float], PRCurve] = field(default_factory=dict, repr=False)

    def to_json(self) -> dict:
        return {
            "map": self.map,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "per_threshold": {f"{t:.2f}": v for t, v in self.per_threshold.items()},
            "per_class": {str(c): {f"{t:.2f}": v for t, v in d.items()} for c, d in self.per_class.items()},
        }


def match_detections(dets: Sequence[Detection], gts: Sequence[LabeledBox], iou_threshold: float) -> list[bool]:
    """True positive flags for score-sorted detections.

    Each detection takes the highest-IoU unmatched gt of its class with
    IoU >= threshold; anything else is a false positive.
    """
    flags = []
    matched = np.zeros(len(gts), dtype=bool)
    gt_classes = np.array([g.class_id for g in gts], dtype=np.int64)
    if gts:
        gt_boxes = np.array([g.box.as_array() for g in gts])
        det_boxes = np.array([d.box.as_array() for d in dets]).reshape(-1, 4)
        overlaps = pairwise_iou(det_boxes, gt_boxes)
    for i, d in enumerate(dets):
        if not gts:
            flags.append(False)
            continue
        ok = (~matched) & (gt_classes == d.class_id) & (overlaps[i] >= iou_threshold)
        if not ok.any():
            flags.append(False)
            continue
        best = int(np.argmax(np.where(ok, overlaps[i], -1.0)))
        matched[best] = True
        flags.append(True)
    return flags


def average_precision(flags: Sequence[bool], num_gts: int) -> PRCurve:
    if num_gts < 0:
        raise ValueError("num_gts must be >= 0")
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    n = np.arange(1, len(tp) + 1, dtype=np.float64)
    if num_gts == 0 or len(tp) == 0:
        return PRCurve(np.zeros(len(tp)), tp / np.maximum(n, 1), 0.0)
    recall = tp / num_gts
    precision = tp / n
    # precision envelope: best precision at this recall or beyond
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    ap = float(np.sum(steps * envelope))
    return PRCurve(recall, precision, ap)


def _sorted(dets: Sequence[Detection]) -> list[Detection]:
    return sorted(dets, key=Detection.sort_key)


def evaluate(images: Sequence[tuple[Sequence[Detection], Sequence[LabeledBox]]],
             thresholds: Sequence[float] = COCO_THRESHOLDS) -> MapReport:
    """AP per class and threshold over several images; mean over classes, then thresholds.

    Classes with neither gts nor detections are skipped. A class with
    detections but no gts scores 0.
    """
    classes = sorted({d.class_id for dets, _ in images for d in dets}
                     | {g.class_id for _, gts in images for g in gts})
    per_class: dict[int, dict[float, float]] = {c: {} for c in classes}
    curves = {}
    for t in thresholds:
        for c in classes:
            scored = []
            num_gts = 0
            for img, (dets, gts) in enumerate(images):
                cdets = _sorted([d for d in dets if d.class_id == c])
                cgts = [g for g in gts if g.class_id == c]
                num_gts += len(cgts)
                for d, f in zip(cdets, match_detections(cdets, cgts, t)):
                    scored.append((-d.score, img, d.anchor_index, f))
            scored.sort(key=lambda r: r[:3])
            curve = average_precision([r[3] for r in scored], num_gts)
            per_class[c][t] = curve.ap
            curves[(c, t)] = curve
    per_threshold = {t: (float(np.mean([per_class[c][t] for c in classes])) if classes else 0.0) for t in thresholds}
    overall = float(np.mean(list(per_threshold.values()))) if per_threshold else 0.0
    return MapReport(overall, per_threshold.get(0.5, float("nan")), per_threshold.get(0.75, float("nan")),
                     per_threshold, per_class, curves)


def mean_ap(dets: Sequence[Detection], gts: Sequence[LabeledBox],
            thresholds: Sequence[float] = COCO_THRESHOLDS) -> MapReport:
    return evaluate([(dets, gts)], thresholds)
