"""BCE and IoU losses with analytic gradients w.r.t. raw predictions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .assigner import BACKGROUND, Assignment
from .geometry import BBox, LabeledBox
from .gridhead import CLS_START, OBJ_INDEX, AnchorGrid, AnchorPoint, RawPrediction, sigmoid

PROB_CLAMP = 1e-7


class NumericFailure(ArithmeticError):
    def __init__(self, message: str, anchor_index: int | None = None, step: int | None = None):
        super().__init__(message)
        self.anchor_index = anchor_index
        self.step = step


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    obj: float = 1.0
    reg: float = 5.0
    iou_kind: str = "iou"  # or "giou"
    # objectness target = IoU of the decoded positive box (held constant)
    iou_obj_target: bool = False

    def __post_init__(self) -> None:
        if min(self.cls, self.obj, self.reg) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.iou_kind not in ("iou", "giou"):
            raise ValueError(f"unknown iou_kind {self.iou_kind!r}")


@dataclass
class TargetSet:
    obj: np.ndarray  # (A,) in {0, 1}
    fg_mask: np.ndarray  # (A,) bool
    boxes: np.ndarray  # (A, 4) gt box for positives, zeros elsewhere
    onehot: np.ndarray  # (A, C)

    @property
    def num_fg(self) -> int:
        return int(self.fg_mask.sum())


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    obj: float
    reg: float
    total: float
    num_fg: int

    def as_dict(self) -> dict:
        return {"cls": self.cls, "obj": self.obj, "reg": self.reg, "total": self.total, "num_fg": self.num_fg}


def build_targets(assign: Assignment, gts: Sequence[LabeledBox], num_classes: int) -> TargetSet:
    labels = np.asarray(assign.anchor_labels)
    a = len(labels)
    if labels.size and labels.max() >= len(gts):
        bad = int(np.flatnonzero(labels >= len(gts))[0])
        raise ValueError(f"anchor {bad} references gt {labels[bad]} but only {len(gts)} gts exist")
    fg = labels != BACKGROUND
    boxes = np.zeros((a, 4))
    onehot = np.zeros((a, num_classes))
    for j in np.flatnonzero(fg):
        gt = gts[labels[j]]
        gt.check_classes(num_classes)
        boxes[j] = gt.box.as_array()
        onehot[j, gt.class_id] = 1.0
    return TargetSet(fg.astype(np.float64), fg, boxes, onehot)


def bce(p, y):
    """Binary cross-entropy on a probability and its gradient w.r.t. the logit.

    Works elementwise on arrays. The loss clamps p to [1e-7, 1 - 1e-7]; the
    gradient is the exact ``p - y``.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pc = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    loss = -(y * np.log(pc) + (1 - y) * np.log1p(-pc))
    grad = p - y
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def bce_logit(z, y):
    """``bce`` evaluated at ``sigmoid(z)``."""
    return bce(sigmoid(z), y)


# -- IoU loss ----------------------------------------------------------------

class IouLoss(NamedTuple):
    loss: float
    grad: np.ndarray  # d loss / d (tx, ty, tw, th)

    @property
    def plateau(self) -> bool:
        """Plain IoU loss on disjoint boxes: loss pinned at 1 with zero gradient."""
        return self.loss >= 1.0 and not np.any(self.grad)


def _span(lo1, hi1, len1, lo2, hi2, len2, inner: bool):
    """Overlap (inner) or enclosing (outer) length of two intervals.

    When one interval contains the other the stored length is used instead of
    a corner difference, so the result is bit-stable under shifts that cannot
    change it.
    """
    first_inside = (lo1 >= lo2) & (hi1 <= hi2)
    second_inside = (lo2 >= lo1) & (hi2 <= hi1)
    if inner:
        raw = np.minimum(hi1, hi2) - np.maximum(lo1, lo2)
        return np.where(first_inside, len1, np.where(second_inside, len2, raw))
    raw = np.maximum(hi1, hi2) - np.minimum(lo1, lo2)
    return np.where(first_inside, len2, np.where(second_inside, len1, raw))


def _side(a, b):
    """1 where a > b, 0 where a < b, 0.5 on ties."""
    return np.where(a > b, 1.0, np.where(a < b, 0.0, 0.5))


def _iou_terms(pred: np.ndarray, gt: np.ndarray, kind: str):
    """Vectorized IoU/GIoU loss and its gradient w.r.t. predicted corners.

    pred, gt: (N, 4) cxcywh. Returns loss (N,) and dL/d(x1, y1, x2, y2) (N, 4).
    """
    pw, ph = pred[:, 2], pred[:, 3]
    gw, gh = gt[:, 2], gt[:, 3]
    px1, py1, px2, py2 = _xyxy(pred).T
    gx1, gy1, gx2, gy2 = _xyxy(gt).T
    iw_raw = _span(px1, px2, pw, gx1, gx2, gw, inner=True)
    ih_raw = _span(py1, py2, ph, gy1, gy2, gh, inner=True)
    overlap = (iw_raw > 0) & (ih_raw > 0)
    iw = np.where(overlap, iw_raw, 0.0)
    ih = np.where(overlap, ih_raw, 0.0)
    inter = iw * ih
    area_p = pw * ph
    area_g = gw * gh
    union = area_p + area_g - inter
    iou = inter / union

    # d inter / d corners, zero when the boxes do not overlap. Where a
    # predicted edge sits exactly on the gt edge the two one-sided slopes are
    # averaged, which makes the gradient vanish at a perfect match.
    d_inter = np.stack([
        -ih * _side(px1, gx1),
        -iw * _side(py1, gy1),
        ih * _side(gx2, px2),
        iw * _side(gy2, py2),
    ], axis=1)
    d_area = np.stack([-ph, -pw, ph, pw], axis=1)
    d_union = d_area - d_inter
    d_iou = (d_inter * union[:, None] - inter[:, None] * d_union) / (union**2)[:, None]

    if kind == "iou":
        return 1.0 - iou, -d_iou

    ew = _span(px1, px2, pw, gx1, gx2, gw, inner=False)
    eh = _span(py1, py2, ph, gy1, gy2, gh, inner=False)
    enc = ew * eh
    d_enc = np.stack([
        -eh * _side(gx1, px1),
        -ew * _side(gy1, py1),
        eh * _side(px2, gx2),
        ew * _side(py2, gy2),
    ], axis=1)
    g = iou - (enc - union) / enc
    # g = iou - 1 + union / enc
    d_g = d_iou + (d_union * enc[:, None] - union[:, None] * d_enc) / (enc**2)[:, None]
    return 1.0 - g, -d_g


def _corner_grad_to_offsets(d_corner: np.ndarray, boxes: np.ndarray, stride: np.ndarray) -> np.ndarray:
    """Chain rule from corner gradients to (tx, ty, tw, th) via the decode formulas."""
    d_cx = d_corner[:, 0] + d_corner[:, 2]
    d_cy = d_corner[:, 1] + d_corner[:, 3]
    d_w = (d_corner[:, 2] - d_corner[:, 0]) / 2
    d_h = (d_corner[:, 3] - d_corner[:, 1]) / 2
    # cx = (gx + tx) s ; w = exp(tw) s
    return np.stack([d_cx * stride, d_cy * stride, d_w * boxes[:, 2], d_h * boxes[:, 3]], axis=1)


def _xyxy(boxes: np.ndarray) -> np.ndarray:
    half = boxes[:, 2:] / 2
    return np.concatenate([boxes[:, :2] - half, boxes[:, :2] + half], axis=1)


def iou_loss_batch(t: np.ndarray, anchors_gx, anchors_gy, stride, gt_boxes: np.ndarray, kind: str = "iou"):
    """(N, 4) offsets against (N, 4) cxcywh gt boxes -> loss (N,), grad (N, 4)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 4)
    stride = np.asarray(stride, dtype=np.float64)
    boxes = np.stack([(anchors_gx + t[:, 0]) * stride, (anchors_gy + t[:, 1]) * stride,
                      np.exp(t[:, 2]) * stride, np.exp(t[:, 3]) * stride], axis=1)
    loss, d_corner = _iou_terms(boxes, np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4), kind)
    return loss, _corner_grad_to_offsets(d_corner, boxes, stride)


def iou_loss(pred: RawPrediction, anchor: AnchorPoint, gt_box: BBox, kind: str = "iou") -> IouLoss:
    loss, grad = iou_loss_batch(
        np.array(pred.t), np.array([anchor.gx]), np.array([anchor.gy]), np.array([anchor.stride]),
        gt_box.as_array()[None, :], kind,
    )
    return IouLoss(float(loss[0]), grad[0])


# -- total loss --------------------------------------------------------------

def total_loss(
    preds: np.ndarray,
    anchors: AnchorGrid,
    targets: TargetSet,
    weights: LossWeights = LossWeights(),
) -> tuple[LossBreakdown, np.ndarray]:
    """Loss over one image and its gradient w.r.t. every raw prediction.

    preds is (A, 5 + C). Objectness BCE runs over all anchors; class BCE and
    IoU loss over positives only. Each sum is divided by max(num_fg, 1).
    Reductions follow the canonical anchor order.
    """
    preds = np.asarray(preds, dtype=np.float64)
    if not np.all(np.isfinite(preds)):
        bad = int(np.flatnonzero(~np.isfinite(preds).all(axis=1))[0])
        raise NumericFailure(f"non-finite prediction at anchor {bad}", anchor_index=bad)
    # overflow surfaces as a NumericFailure below, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        return _total_loss(preds, anchors, targets, weights)


def _total_loss(preds, anchors, targets, weights):
    a = preds.shape[0]
    fg = targets.fg_mask
    num_fg = int(fg.sum())
    norm = float(max(num_fg, 1))
    grad = np.zeros_like(preds)

    obj_target = targets.obj
    reg_loss = 0.0
    if num_fg:
        idx = np.flatnonzero(fg)
        r_loss, r_grad = iou_loss_batch(preds[idx, :4], anchors.gx[idx], anchors.gy[idx],
                                        anchors.stride[idx], targets.boxes[idx], weights.iou_kind)
        if weights.iou_obj_target:
            obj_target = obj_target.copy()
            ious = 1.0 - r_loss if weights.iou_kind == "iou" else _plain_iou(preds[idx], anchors, idx, targets)
            obj_target[idx] = np.clip(ious, 0.0, 1.0)
        reg_loss = float(np.sum(r_loss)) / norm
        grad[idx, :4] = weights.reg * r_grad / norm

        c_loss, c_grad = bce(sigmoid(preds[idx, CLS_START:]), targets.onehot[idx])
        cls_loss = float(np.sum(c_loss)) / norm
        grad[idx, CLS_START:] = weights.cls * c_grad / norm
    else:
        cls_loss = 0.0

    o_loss, o_grad = bce(sigmoid(preds[:, OBJ_INDEX]), obj_target)
    obj_loss = float(np.sum(o_loss)) / norm
    grad[:, OBJ_INDEX] = weights.obj * o_grad / norm

    total = weights.cls * cls_loss + weights.obj * obj_loss + weights.reg * reg_loss
    if not math.isfinite(total) or not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad).all(axis=1))[0]) if not np.all(np.isfinite(grad)) else -1
        raise NumericFailure(f"non-finite loss (anchor {bad})", anchor_index=bad)
    return LossBreakdown(cls_loss, obj_loss, reg_loss, total, num_fg), grad


def _plain_iou(rows: np.ndarray, anchors: AnchorGrid, idx: np.ndarray, targets: TargetSet) -> np.ndarray:
    loss, _ = iou_loss_batch(rows[:, :4], anchors.gx[idx], anchors.gy[idx], anchors.stride[idx],
                             targets.boxes[idx], "iou")
    return 1.0 - loss


# -- gradient checking -------------------------------------------------------

def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return out


def grad_check(f: Callable[[np.ndarray], float], x: np.ndarray, h: float, analytic: np.ndarray | None = None,
               grad: Callable[[np.ndarray], np.ndarray] | None = None) -> float:
    """Max relative error between an analytic gradient and central differences.

    Provide the analytic gradient either directly or as a callable.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    x = np.asarray(x, dtype=np.float64)
    if analytic is None:
        if grad is None:
            raise ValueError("need the analytic gradient or a gradient function")
        analytic = grad(x)
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = central_difference(f, x, h)
    rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0
