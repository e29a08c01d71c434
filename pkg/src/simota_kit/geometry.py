"""Axis-aligned box geometry.

Boxes are stored center-size ``(cx, cy, w, h)`` in pixels; corner form
``(x1, y1, x2, y2)`` is computed on demand. Everything is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

MIN_BOX_AREA = 1.0
MIN_BOX_SIDE = 1.0


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box component in {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive size, got w={self.w} h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @property
    def x1(self) -> float:
        return self.cx - self.w / 2

    @property
    def y1(self) -> float:
        return self.cy - self.h / 2

    @property
    def x2(self) -> float:
        return self.cx + self.w / 2

    @property
    def y2(self) -> float:
        return self.cy + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class LabeledBox:
    box: BBox
    class_id: int

    def __post_init__(self) -> None:
        if int(self.class_id) != self.class_id or self.class_id < 0:
            raise ValueError(f"class_id must be a non-negative integer, got {self.class_id}")

    def check_classes(self, num_classes: int) -> None:
        if self.class_id >= num_classes:
            raise ValueError(f"class_id {self.class_id} out of range for {num_classes} classes")


@dataclass(frozen=True)
class Affine2D:
    """Row-major 2x3 matrix ``[[a, b, tx], [c, d, ty]]``."""

    a: float = 1.0
    b: float = 0.0
    tx: float = 0.0
    c: float = 0.0
    d: float = 1.0
    ty: float = 0.0

    def __post_init__(self) -> None:
        if self.a * self.d - self.b * self.c == 0:
            raise ValueError("affine transform is singular")

    @classmethod
    def identity(cls) -> "Affine2D":
        return cls()

    @classmethod
    def translation(cls, dx: float, dy: float) -> "Affine2D":
        return cls(tx=dx, ty=dy)

    @classmethod
    def scaling(cls, sx: float, sy: Optional[float] = None) -> "Affine2D":
        return cls(a=sx, d=sx if sy is None else sy)

    @classmethod
    def hflip(cls, width: float) -> "Affine2D":
        return cls(a=-1.0, tx=width)

    def then(self, other: "Affine2D") -> "Affine2D":
        """Composition applying ``self`` first, then ``other``."""
        o = other
        return Affine2D(
            a=o.a * self.a + o.b * self.c,
            b=o.a * self.b + o.b * self.d,
            tx=o.a * self.tx + o.b * self.ty + o.tx,
            c=o.c * self.a + o.d * self.c,
            d=o.c * self.b + o.d * self.d,
            ty=o.c * self.tx + o.d * self.ty + o.ty,
        )

    def apply_point(self, x: float, y: float) -> tuple[float, float]:
        return (self.a * x + self.b * y + self.tx, self.c * x + self.d * y + self.ty)

    def as_list(self) -> list[list[float]]:
        return [[self.a, self.b, self.tx], [self.c, self.d, self.ty]]

    @classmethod
    def from_list(cls, rows) -> "Affine2D":
        (a, b, tx), (c, d, ty) = rows
        return cls(float(a), float(b), float(tx), float(c), float(d), float(ty))


def _overlap(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: BBox, b: BBox) -> float:
    if a == b:
        return 1.0
    inter = _overlap(a, b)
    return inter / (a.area + b.area - inter)


def giou(a: BBox, b: BBox) -> float:
    if a == b:
        return 1.0
    inter = _overlap(a, b)
    union = a.area + b.area - inter
    enclosing = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    return inter / union - (enclosing - union) / enclosing


def apply_affine(t: Affine2D, b: BBox) -> BBox:
    if t == Affine2D.identity():
        return b
    xs, ys = [], []
    for x, y in ((b.x1, b.y1), (b.x2, b.y1), (b.x1, b.y2), (b.x2, b.y2)):
        px, py = t.apply_point(x, y)
        xs.append(px)
        ys.append(py)
    return BBox.from_corners(min(xs), min(ys), max(xs), max(ys))


def clip_to_rect(
    b: BBox,
    x1: float,
    y1: float,
    x2: float,
    y2: float,
    min_area: float = MIN_BOX_AREA,
    min_side: float = MIN_BOX_SIDE,
) -> Optional[BBox]:
    """Intersection of ``b`` with a rectangle, or None if what is left is too small."""
    nx1, ny1 = max(b.x1, x1), max(b.y1, y1)
    nx2, ny2 = min(b.x2, x2), min(b.y2, y2)
    w, h = nx2 - nx1, ny2 - ny1
    if w <= 0 or h <= 0 or w < min_side or h < min_side or w * h < min_area:
        return None
    if (nx1, ny1, nx2, ny2) == b.corners():
        return b
    return BBox.from_corners(nx1, ny1, nx2, ny2)


def clip_to_canvas(
    b: BBox,
    width: float,
    height: float,
    min_area: float = MIN_BOX_AREA,
    min_side: float = MIN_BOX_SIDE,
) -> Optional[BBox]:
    if width <= 0 or height <= 0:
        raise ValueError("canvas must have positive size")
    return clip_to_rect(b, 0.0, 0.0, width, height, min_area, min_side)


# -- vectorized forms, boxes as (..., 4) arrays in cxcywh --------------------

def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    wh = boxes[..., 2:] - boxes[..., :2]
    return np.concatenate([boxes[..., :2] + wh / 2, wh], axis=-1)


def pairwise_iou(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """IoU matrix of shape (N, M) for cxcywh arrays (N, 4) and (M, 4)."""
    a = cxcywh_to_xyxy(np.reshape(boxes1, (-1, 4)))
    b = cxcywh_to_xyxy(np.reshape(boxes2, (-1, 4)))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)
