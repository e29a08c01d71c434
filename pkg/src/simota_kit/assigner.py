"""Label assignment: center priors, SimOTA, Sinkhorn-Knopp OT, one-to-one matching.

Anchors are labelled with a gt index or ``BACKGROUND`` (-1).
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

from .geometry import LabeledBox, pairwise_iou
from .gridhead import AnchorGrid, DecodedBatch, DecodedPrediction, FpnSpec, assign_fpn_level

BACKGROUND = -1
PROB_CLAMP = 1e-7
IOU_EPS = 1e-8


class CenterOutsideImage(UserWarning):
    """A ground-truth center lies outside the image; it gets no center candidates."""


class InfeasibleAssignment(ValueError):
    pass


@dataclass(frozen=True)
class AssignerConfig:
    lam: float = 3.0
    center_mode: Literal["cell3x3", "radius"] = "radius"
    center_radius: float = 2.5
    q: int = 10
    offcenter_penalty: float = 1e5
    k_cap: int = 10

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.q < 1 or self.k_cap < 1:
            raise ValueError("q and k_cap must be >= 1")
        if self.offcenter_penalty < 0:
            raise ValueError("offcenter_penalty must be >= 0")
        if self.center_mode not in ("cell3x3", "radius"):
            raise ValueError(f"unknown center_mode {self.center_mode!r}")
        if self.center_radius <= 0:
            raise ValueError("center_radius must be > 0")


@dataclass
class CostMatrix:
    costs: np.ndarray  # (G, A)
    cls_costs: np.ndarray
    reg_costs: np.ndarray
    center_mask: np.ndarray  # bool
    ious: np.ndarray
    # BCE of each prediction against the all-background target; the cost of
    # the background supplier in the OT formulation
    bg_costs: Optional[np.ndarray] = None
    lam: float = 3.0
    offcenter_penalty: float = 1e5

    def __post_init__(self) -> None:
        if self.bg_costs is None:
            self.bg_costs = np.zeros(self.costs.shape[1])

    @property
    def num_gts(self) -> int:
        return self.costs.shape[0]

    @property
    def num_anchors(self) -> int:
        return self.costs.shape[1]

    @classmethod
    def from_parts(
        cls,
        cls_costs: np.ndarray,
        reg_costs: np.ndarray,
        center_mask: np.ndarray,
        ious: np.ndarray,
        lam: float = 3.0,
        offcenter_penalty: float = 1e5,
        bg_costs: Optional[np.ndarray] = None,
    ) -> "CostMatrix":
        cls_costs = np.asarray(cls_costs, dtype=np.float64)
        reg_costs = np.asarray(reg_costs, dtype=np.float64)
        center_mask = np.asarray(center_mask, dtype=bool)
        costs = cls_costs + lam * reg_costs + offcenter_penalty * (~center_mask)
        return cls(costs, cls_costs, reg_costs, center_mask, np.asarray(ious, dtype=np.float64),
                   bg_costs, lam, offcenter_penalty)


@dataclass
class Assignment:
    anchor_labels: np.ndarray  # (A,) gt index or BACKGROUND
    per_gt_positives: list[list[int]]
    k_values: list[int]
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def from_labels(cls, labels: np.ndarray, k_values: Sequence[int], diagnostics: Optional[dict] = None) -> "Assignment":
        labels = np.asarray(labels, dtype=np.int64)
        per_gt = [np.flatnonzero(labels == i).tolist() for i in range(len(k_values))]
        return cls(labels, per_gt, [int(k) for k in k_values], diagnostics or {})

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_labels)

    @property
    def num_fg(self) -> int:
        return int(np.count_nonzero(self.anchor_labels != BACKGROUND))

    @property
    def fg_mask(self) -> np.ndarray:
        return self.anchor_labels != BACKGROUND

    def check(self, enforce_k: bool = True) -> None:
        """Raise AssertionError if the assignment is internally inconsistent."""
        g = len(self.k_values)
        assert len(self.per_gt_positives) == g
        assert np.all((self.anchor_labels >= BACKGROUND) & (self.anchor_labels < g))
        for i, pos in enumerate(self.per_gt_positives):
            assert pos == np.flatnonzero(self.anchor_labels == i).tolist()
            if enforce_k:
                assert len(pos) <= self.k_values[i], (i, len(pos), self.k_values[i])

    def to_json(self) -> dict:
        return {
            "anchor_labels": self.anchor_labels.tolist(),
            "per_gt_positives": self.per_gt_positives,
            "k_values": self.k_values,
            "num_fg": self.num_fg,
            "diagnostics": self.diagnostics,
        }


# -- center prior ------------------------------------------------------------

def _center_inside(gt: LabeledBox, image_size: tuple[int, int]) -> bool:
    h, w = image_size
    return 0.0 <= gt.box.cx <= w and 0.0 <= gt.box.cy <= h


def center_candidates(
    gt: LabeledBox, anchors: AnchorGrid, cfg: AssignerConfig, levels: Optional[Sequence[int]] = None
) -> np.ndarray:
    """Boolean mask over anchors near the gt center.

    ``cell3x3`` takes the cell holding the center plus its 8 neighbours on
    every level (clipped at the grid border); ``radius`` takes anchors whose
    cell center is strictly closer than ``center_radius`` strides.
    ``levels`` restricts the candidates to some FPN levels.
    """
    mask = np.zeros(len(anchors), dtype=bool)
    if not _center_inside(gt, anchors.image_size):
        warnings.warn(f"gt center ({gt.box.cx}, {gt.box.cy}) outside image", CenterOutsideImage, stacklevel=2)
        return mask
    stride = anchors.stride.astype(np.float64)
    if cfg.center_mode == "cell3x3":
        for lvl, s in enumerate(anchors.spec.strides):
            gh, gw = anchors.spec.grid_shape(lvl)
            cgx = min(int(math.floor(gt.box.cx / s)), gw - 1)
            cgy = min(int(math.floor(gt.box.cy / s)), gh - 1)
            sel = anchors.level == lvl
            mask |= sel & (np.abs(anchors.gx - cgx) <= 1) & (np.abs(anchors.gy - cgy) <= 1)
    else:
        centers = anchors.centers
        dist = np.hypot(centers[:, 0] - gt.box.cx, centers[:, 1] - gt.box.cy)
        mask = dist < cfg.center_radius * stride
    if levels is not None:
        mask &= np.isin(anchors.level, list(levels))
    return mask


def center_mask_matrix(gts: Sequence[LabeledBox], anchors: AnchorGrid, cfg: AssignerConfig) -> np.ndarray:
    if not gts:
        return np.zeros((0, len(anchors)), dtype=bool)
    return np.stack([center_candidates(g, anchors, cfg) for g in gts])


# -- cost matrix -------------------------------------------------------------

def _as_batch(preds) -> DecodedBatch:
    if isinstance(preds, DecodedBatch):
        return preds
    preds = list(preds)
    if preds and isinstance(preds[0], DecodedPrediction):
        return DecodedBatch.from_list(preds)
    raise TypeError("preds must be a DecodedBatch or a list of DecodedPrediction")


def cost_matrix(preds, gts: Sequence[LabeledBox], anchors: AnchorGrid, cfg: AssignerConfig) -> CostMatrix:
    batch = _as_batch(preds)
    a = len(batch)
    if a == 0:
        raise ValueError("cost matrix needs at least one prediction")
    if len(anchors) != a:
        raise ValueError(f"{a} predictions for {len(anchors)} anchors")
    for name, arr in (("boxes", batch.boxes), ("obj_prob", batch.obj_prob), ("cls_probs", batch.cls_probs)):
        if np.isnan(arr).any():
            bad = int(np.flatnonzero(np.isnan(arr).reshape(a, -1).any(axis=1))[0])
            raise ValueError(f"NaN in prediction {name} at anchor {bad}")
    num_classes = batch.cls_probs.shape[1]
    for g in gts:
        g.check_classes(num_classes)

    joint = np.sqrt(batch.cls_probs * batch.obj_prob[:, None])
    joint = np.clip(joint, PROB_CLAMP, 1 - PROB_CLAMP)
    neg = -np.log1p(-joint)  # (A, C) loss of a zero target
    pos = -np.log(joint)
    bg_costs = neg.sum(axis=1)

    g = len(gts)
    if g == 0:
        empty = np.zeros((0, a))
        return CostMatrix(empty, empty.copy(), empty.copy(), np.zeros((0, a), dtype=bool), empty.copy(),
                          bg_costs, cfg.lam, cfg.offcenter_penalty)
    classes = np.array([gt.class_id for gt in gts])
    cls_costs = bg_costs[None, :] - neg[:, classes].T + pos[:, classes].T
    gt_boxes = np.array([gt.box.as_array() for gt in gts])
    ious = pairwise_iou(gt_boxes, batch.boxes)
    reg_costs = -np.log(ious + IOU_EPS)
    mask = center_mask_matrix(gts, anchors, cfg)
    return CostMatrix.from_parts(cls_costs, reg_costs, mask, ious, cfg.lam, cfg.offcenter_penalty, bg_costs)


# -- SimOTA ------------------------------------------------------------------

def dynamic_k(ious: np.ndarray, cfg: AssignerConfig, candidate_mask: np.ndarray) -> np.ndarray:
    """Per-gt positive count from the summed top-q candidate IoUs.

    Rounded half-up and clamped to [1, min(k_cap, #candidates)]; a gt with no
    candidates still reports k = 1.
    """
    ious = np.asarray(ious, dtype=np.float64)
    candidate_mask = np.asarray(candidate_mask, dtype=bool)
    ks = np.ones(ious.shape[0], dtype=np.int64)
    for i in range(ious.shape[0]):
        cand = np.sort(ious[i, candidate_mask[i]])[::-1]
        total = float(cand[: cfg.q].sum())
        k = int(math.floor(total + 0.5))
        ks[i] = max(1, min(k, cfg.k_cap, len(cand)))
    return ks


def simota_select(cm: CostMatrix, k_values: Sequence[int]) -> list[np.ndarray]:
    """Pre-conflict choice: the k least-cost center candidates per gt (ties -> lower anchor)."""
    picks = []
    for i, k in enumerate(k_values):
        cand = np.flatnonzero(cm.center_mask[i])
        order = np.argsort(cm.costs[i, cand], kind="stable")
        picks.append(cand[order[:k]])
    return picks


def simota_assign(cm: CostMatrix, cfg: AssignerConfig) -> Assignment:
    g, a = cm.costs.shape
    k_values = dynamic_k(cm.ious, cfg, cm.center_mask)
    picks = simota_select(cm, k_values)

    claims = np.zeros((g, a), dtype=bool)
    for i, p in enumerate(picks):
        claims[i, p] = True
    labels = np.full(a, BACKGROUND, dtype=np.int64)
    claimed = claims.any(axis=0)
    masked = np.where(claims, cm.costs, np.inf)
    if claimed.any():
        labels[claimed] = np.argmin(masked[:, claimed], axis=0)

    conflicts = []
    for j in np.flatnonzero(claims.sum(axis=0) > 1):
        conflicts.append({"anchor": int(j), "claimants": np.flatnonzero(claims[:, j]).tolist(), "winner": int(labels[j])})
    candidate_counts = cm.center_mask.sum(axis=1).tolist()
    diagnostics = {
        "k_values": k_values.tolist(),
        "candidate_counts": candidate_counts,
        "no_candidate_gts": [i for i, c in enumerate(candidate_counts) if c == 0],
        "conflicts": conflicts,
        "pre_conflict": [p.tolist() for p in picks],
    }
    return Assignment.from_labels(labels, k_values.tolist(), diagnostics)


# -- Sinkhorn-Knopp OT -------------------------------------------------------

@dataclass
class TransportPlan:
    plan: np.ndarray  # (G + 1, A); last row is the background supplier
    supply: np.ndarray
    demand: np.ndarray
    converged: bool
    violation: float
    iterations: int
    violation_history: list[float] = field(default_factory=list)

    @property
    def num_gts(self) -> int:
        return self.plan.shape[0] - 1


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def sinkhorn_ot(
    cm: CostMatrix,
    k_values: Sequence[int],
    eps: float = 0.1,
    max_iters: int = 10_000,
    tol: float = 1e-6,
) -> TransportPlan:
    """Entropic OT between gt supplies (k each, background takes the rest) and unit anchor demands.

    Log-domain updates, so off-center penalties of 1e5 do not underflow the
    kernel. Each iteration rescales columns then rows; after the row step the
    row marginals are exact, so the reported violation is the column error,
    max_j |sum_i plan_ij - 1|. Stops when it drops below ``tol``.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    g, a = cm.costs.shape
    k = np.asarray(k_values, dtype=np.float64)
    if len(k) != g:
        raise ValueError("need one k per gt")
    background = a - k.sum()
    if background < 0:
        raise InfeasibleAssignment(f"total k {k.sum():g} exceeds {a} anchors")
    supply = np.append(k, background)
    demand = np.ones(a)
    scaled = -np.vstack([cm.costs, cm.bg_costs[None, :]]) / eps  # log kernel
    with np.errstate(divide="ignore"):
        log_supply = np.log(supply)

    # potentials in units of eps: plan = exp(u_i + v_j + scaled_ij)
    u = np.zeros(g + 1)
    v = -_lse(scaled, axis=0)
    history: list[float] = []
    violation = math.inf
    it = 0
    while it < max_iters:
        it += 1
        u = log_supply - _lse(scaled + v[None, :], axis=1)
        # the next column update doubles as the violation measurement
        v_next = -_lse(scaled + u[:, None], axis=0)
        violation = float(np.max(np.abs(np.expm1(v - v_next))))
        history.append(violation)
        if violation < tol:
            break
        v = v_next
    plan = np.exp(u[:, None] + v[None, :] + scaled)
    return TransportPlan(plan, supply, demand, violation < tol, violation, it, history)


def plan_to_assignment(plan: TransportPlan) -> Assignment:
    """Each anchor goes to the row with the largest mass; ties to the lower row."""
    g = plan.num_gts
    rows = np.argmax(plan.plan, axis=0)
    labels = np.where(rows == g, BACKGROUND, rows).astype(np.int64)
    k_values = [int(round(v)) for v in plan.supply[:g]]
    diagnostics = {
        "converged": bool(plan.converged),
        "violation": float(plan.violation),
        "iterations": int(plan.iterations),
    }
    return Assignment.from_labels(labels, k_values, diagnostics)


def compare_simota_ot(cm: CostMatrix, cfg: AssignerConfig, eps: float = 0.1, max_iters: int = 10_000,
                      tol: float = 1e-6) -> dict:
    """Run SimOTA and entropic OT on the same costs and report how often they agree.

    OT uses SimOTA's dynamic k as gt supplies and decodes the plan by column
    argmax. Agreement is reported over all anchors and over anchors that
    either method marks as foreground.
    """
    t0 = time.perf_counter()
    simota = simota_assign(cm, cfg)
    t1 = time.perf_counter()
    plan = sinkhorn_ot(cm, simota.k_values, eps, max_iters, tol)
    ot = plan_to_assignment(plan)
    t2 = time.perf_counter()
    agree = simota.anchor_labels == ot.anchor_labels
    return {
        "agreement": float(agree.mean()) if agree.size else 1.0,
        "agreement_fg": (float(agree[simota.fg_mask | ot.fg_mask].mean())
                         if (simota.fg_mask | ot.fg_mask).any() else 1.0),
        "k_values": simota.k_values,
        "sinkhorn": {"converged": bool(plan.converged), "violation": float(plan.violation),
                     "iterations": int(plan.iterations), "eps": eps},
        "simota_labels": simota.anchor_labels.tolist(),
        "ot_labels": ot.anchor_labels.tolist(),
        "wall_time": {"simota": t1 - t0, "sinkhorn": t2 - t1},
    }


# -- one-to-one --------------------------------------------------------------

def hungarian(cost: np.ndarray) -> np.ndarray:
    """Min-cost matching of every row of an (n, m) matrix, n <= m.

    Returns the column index chosen for each row. Shortest augmenting path
    with row/column potentials, O(n^2 m).
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise InfeasibleAssignment(f"cannot match {n} rows into {m} columns")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    inf = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    # owner[j] = 1-based row matched to 1-based column j; column 0 is the virtual root
    owner = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    match = np.zeros(n, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            match[owner[j] - 1] = j - 1
    return match


def one_to_one_assign(cm: CostMatrix) -> Assignment:
    g, a = cm.costs.shape
    match = hungarian(cm.costs)
    labels = np.full(a, BACKGROUND, dtype=np.int64)
    labels[match] = np.arange(g)
    total = float(cm.costs[np.arange(g), match].sum()) if g else 0.0
    return Assignment.from_labels(labels, [1] * g, {"matching": match.tolist(), "total_cost": total})


# -- hand-crafted assigners --------------------------------------------------

def _center_cell(gt: LabeledBox, anchors: AnchorGrid, level: int) -> int:
    s = anchors.spec.strides[level]
    gh, gw = anchors.spec.grid_shape(level)
    gx = min(max(int(math.floor(gt.box.cx / s)), 0), gw - 1)
    gy = min(max(int(math.floor(gt.box.cy / s)), 0), gh - 1)
    return anchors.index_of(level, gx, gy)


def _claim_in_order(candidates: list[list[int]], num_anchors: int) -> Assignment:
    labels = np.full(num_anchors, BACKGROUND, dtype=np.int64)
    collisions = []
    for i, cand in enumerate(candidates):
        for j in cand:
            if labels[j] == BACKGROUND:
                labels[j] = i
            else:
                collisions.append({"anchor": int(j), "kept": int(labels[j]), "lost": i})
    k_values = [max(1, len(c)) for c in candidates]
    return Assignment.from_labels(labels, k_values, {"collisions": collisions,
                                                     "candidate_counts": [len(c) for c in candidates]})


def single_center_assign(gts: Sequence[LabeledBox], anchors: AnchorGrid, spec: Optional[FpnSpec] = None) -> Assignment:
    """One positive per gt: the cell holding its center on its scale-range level.

    When two gts land on the same anchor the earlier gt keeps it.
    """
    spec = spec or anchors.spec
    cands = [[_center_cell(gt, anchors, assign_fpn_level(gt, spec))] for gt in gts]
    return _claim_in_order(cands, len(anchors))


def multi_positive_assign(gts: Sequence[LabeledBox], anchors: AnchorGrid, spec: Optional[FpnSpec] = None) -> Assignment:
    """Center 3x3 cells on the gt's scale-range level; earlier gts win shared cells."""
    spec = spec or anchors.spec
    cfg = AssignerConfig(center_mode="cell3x3")
    cands = []
    for gt in gts:
        level = assign_fpn_level(gt, spec)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CenterOutsideImage)
            mask = center_candidates(gt, anchors, cfg, levels=[level])
        if not mask.any():
            mask[_center_cell(gt, anchors, level)] = True
        cands.append(np.flatnonzero(mask).tolist())
    return _claim_in_order(cands, len(anchors))
