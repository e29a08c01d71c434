"""FPN anchor points, anchor-free box coding and head output layouts.

Per-anchor attributes are always laid out as ``[tx, ty, tw, th, obj, cls...]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Literal, Sequence

import numpy as np

from .geometry import BBox, LabeledBox

DEFAULT_STRIDES = (8, 16, 32)
DEFAULT_SCALE_RANGES = ((0.0, 64.0), (64.0, 128.0), (128.0, math.inf))
# exp(tw) beyond this multiple of the stride is treated as a blown-up prediction
DECODE_OVERFLOW = 1e8

BOX_DIMS = 4
OBJ_INDEX = 4
CLS_START = 5


class DecodeOverflowError(ArithmeticError):
    pass


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class FpnSpec:
    strides: tuple[int, ...] = DEFAULT_STRIDES
    input_size: tuple[int, int] = (128, 128)  # (H, W)
    scale_ranges: tuple[tuple[float, float], ...] = DEFAULT_SCALE_RANGES

    def __post_init__(self) -> None:
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(
            self, "scale_ranges", tuple((float(lo), float(hi)) for lo, hi in self.scale_ranges)
        )
        if not self.strides or any(s <= 0 for s in self.strides):
            raise ValueError("strides must be positive")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError("strides must be strictly increasing")
        h, w = self.input_size
        for s in self.strides:
            if h % s or w % s or h <= 0 or w <= 0:
                raise ValueError(f"input size {self.input_size} not divisible by stride {s}")
        if len(self.scale_ranges) != len(self.strides):
            raise ValueError("need one scale range per level")
        prev_hi = 0.0
        for lo, hi in self.scale_ranges:
            if lo != prev_hi or hi <= lo:
                raise ValueError("scale ranges must be contiguous, increasing and start at 0")
            prev_hi = hi
        if prev_hi != math.inf:
            raise ValueError("last scale range must extend to infinity")

    @classmethod
    def single_level(cls, stride: int, input_size: tuple[int, int]) -> "FpnSpec":
        return cls((stride,), input_size, ((0.0, math.inf),))

    @property
    def num_levels(self) -> int:
        return len(self.strides)

    def grid_shape(self, level: int) -> tuple[int, int]:
        s = self.strides[level]
        return (self.input_size[0] // s, self.input_size[1] // s)

    def num_anchors(self) -> int:
        return sum(h * w for h, w in map(self.grid_shape, range(self.num_levels)))


@dataclass(frozen=True)
class AnchorPoint:
    level: int
    gx: int
    gy: int
    stride: int

    @property
    def center(self) -> tuple[float, float]:
        return ((self.gx + 0.5) * self.stride, (self.gy + 0.5) * self.stride)


class AnchorGrid(Sequence[AnchorPoint]):
    """All anchor points of an FpnSpec, levels in stride order, row-major per level.

    Behaves as a read-only list of AnchorPoint and also exposes the same data
    as flat numpy arrays for the vectorized code paths.
    """

    def __init__(self, spec: FpnSpec):
        self.spec = spec
        levels, gxs, gys, strides = [], [], [], []
        self.level_offsets = [0]
        for lvl, s in enumerate(spec.strides):
            gh, gw = spec.grid_shape(lvl)
            yy, xx = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
            gxs.append(xx.ravel())
            gys.append(yy.ravel())
            levels.append(np.full(gh * gw, lvl))
            strides.append(np.full(gh * gw, s))
            self.level_offsets.append(self.level_offsets[-1] + gh * gw)
        self.level = np.concatenate(levels).astype(np.int64)
        self.gx = np.concatenate(gxs).astype(np.int64)
        self.gy = np.concatenate(gys).astype(np.int64)
        self.stride = np.concatenate(strides).astype(np.int64)
        for arr in (self.level, self.gx, self.gy, self.stride):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.level)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        i = range(len(self))[i]
        return AnchorPoint(int(self.level[i]), int(self.gx[i]), int(self.gy[i]), int(self.stride[i]))

    def __iter__(self) -> Iterator[AnchorPoint]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if isinstance(other, AnchorGrid):
            return self.spec == other.spec
        return list(self) == list(other)

    def index_of(self, level: int, gx: int, gy: int) -> int:
        _, gw = self.spec.grid_shape(level)
        return self.level_offsets[level] + gy * gw + gx

    @property
    def centers(self) -> np.ndarray:
        """(A, 2) cell centers in pixels."""
        return np.stack([(self.gx + 0.5) * self.stride, (self.gy + 0.5) * self.stride], axis=1)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.spec.input_size


def build_anchors(spec: FpnSpec) -> AnchorGrid:
    return AnchorGrid(spec)


@dataclass(frozen=True)
class RawPrediction:
    t: tuple[float, float, float, float]
    obj_logit: float
    cls_logits: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "t", tuple(float(v) for v in self.t))
        object.__setattr__(self, "cls_logits", tuple(float(v) for v in self.cls_logits))
        vals = (*self.t, self.obj_logit, *self.cls_logits)
        if len(self.t) != 4 or not all(math.isfinite(v) for v in vals):
            raise ValueError("raw prediction needs 4 finite offsets and finite logits")

    def as_array(self) -> np.ndarray:
        return np.array([*self.t, self.obj_logit, *self.cls_logits], dtype=np.float64)

    @classmethod
    def from_array(cls, row) -> "RawPrediction":
        row = [float(v) for v in row]
        return cls(tuple(row[:4]), row[4], tuple(row[5:]))


@dataclass(frozen=True)
class DecodedPrediction:
    box: BBox
    obj_prob: float
    cls_probs: tuple[float, ...]


def decode(p: RawPrediction, a: AnchorPoint) -> DecodedPrediction:
    tx, ty, tw, th = p.t
    s = a.stride
    if max(tw, th) > math.log(DECODE_OVERFLOW * s):
        raise DecodeOverflowError(f"size offset {max(tw, th)} overflows at stride {s}")
    box = BBox((a.gx + tx) * s, (a.gy + ty) * s, math.exp(tw) * s, math.exp(th) * s)
    return DecodedPrediction(
        box,
        float(sigmoid(p.obj_logit)),
        tuple(float(v) for v in sigmoid(np.array(p.cls_logits))),
    )


def encode(b: BBox, a: AnchorPoint) -> tuple[float, float, float, float]:
    s = a.stride
    return (b.cx / s - a.gx, b.cy / s - a.gy, math.log(b.w / s), math.log(b.h / s))


def decode_boxes(raw: np.ndarray, anchors: AnchorGrid) -> np.ndarray:
    """Vectorized box decode: (A, >=4) offsets -> (A, 4) cxcywh."""
    t = np.asarray(raw, dtype=np.float64)[:, :4]
    s = anchors.stride.astype(np.float64)
    over = t[:, 2:].max(axis=1) > np.log(DECODE_OVERFLOW * s) if t.shape[0] else np.zeros(0, bool)
    if over.any():
        bad = int(np.flatnonzero(over)[0])
        raise DecodeOverflowError(f"size offset overflows at anchor {bad}")
    return np.stack(
        [(anchors.gx + t[:, 0]) * s, (anchors.gy + t[:, 1]) * s, np.exp(t[:, 2]) * s, np.exp(t[:, 3]) * s],
        axis=1,
    )


def encode_boxes(boxes: np.ndarray, anchors: AnchorGrid) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    s = anchors.stride.astype(np.float64)
    return np.stack(
        [boxes[:, 0] / s - anchors.gx, boxes[:, 1] / s - anchors.gy, np.log(boxes[:, 2] / s), np.log(boxes[:, 3] / s)],
        axis=1,
    )


@dataclass(frozen=True)
class DecodedBatch:
    """Decoded predictions for every anchor, as arrays."""

    boxes: np.ndarray  # (A, 4) cxcywh
    obj_prob: np.ndarray  # (A,)
    cls_probs: np.ndarray  # (A, C)

    def __len__(self) -> int:
        return len(self.boxes)

    @classmethod
    def from_raw(cls, raw: np.ndarray, anchors: AnchorGrid) -> "DecodedBatch":
        raw = np.asarray(raw, dtype=np.float64)
        return cls(decode_boxes(raw, anchors), sigmoid(raw[:, OBJ_INDEX]), sigmoid(raw[:, CLS_START:]))

    @classmethod
    def from_list(cls, preds: Sequence[DecodedPrediction]) -> "DecodedBatch":
        return cls(
            np.array([p.box.as_array() for p in preds], dtype=np.float64).reshape(-1, 4),
            np.array([p.obj_prob for p in preds], dtype=np.float64),
            np.array([p.cls_probs for p in preds], dtype=np.float64).reshape(len(preds), -1),
        )


def assign_fpn_level(gt: LabeledBox | BBox, spec: FpnSpec) -> int:
    box = gt.box if isinstance(gt, LabeledBox) else gt
    size = max(box.w, box.h)
    for level, (lo, hi) in enumerate(spec.scale_ranges):
        if lo < size <= hi:
            return level
    return spec.num_levels - 1


@dataclass(frozen=True)
class HeadLayout:
    kind: Literal["coupled", "decoupled"]
    num_classes: int
    level_shapes: tuple[tuple[int, int], ...]
    # per level: ordered (plane name, channel count)
    planes: tuple[tuple[str, int], ...] = field(default=())

    @property
    def attrs_per_anchor(self) -> int:
        return BOX_DIMS + 1 + self.num_classes

    @property
    def level_channels(self) -> list[dict[str, int]]:
        return [dict(self.planes) for _ in self.level_shapes]

    def flatten(self, outputs: list[dict[str, np.ndarray]]) -> np.ndarray:
        """Planar per-level outputs -> (A, 5 + C) per-anchor rows."""
        rows = []
        for lvl, (gh, gw) in enumerate(self.level_shapes):
            out = outputs[lvl]
            if self.kind == "coupled":
                stacked = out["pred"]
            else:
                stacked = np.concatenate([out["reg"], out["obj"], out["cls"]], axis=0)
            if stacked.shape != (self.attrs_per_anchor, gh, gw):
                raise ValueError(f"level {lvl}: expected {(self.attrs_per_anchor, gh, gw)}, got {stacked.shape}")
            rows.append(stacked.reshape(self.attrs_per_anchor, gh * gw).T)
        return np.concatenate(rows, axis=0)

    def unflatten(self, flat: np.ndarray) -> list[dict[str, np.ndarray]]:
        outputs = []
        start = 0
        for gh, gw in self.level_shapes:
            block = flat[start : start + gh * gw].T.reshape(self.attrs_per_anchor, gh, gw)
            start += gh * gw
            if self.kind == "coupled":
                outputs.append({"pred": block.copy()})
            else:
                outputs.append(
                    {"reg": block[:BOX_DIMS].copy(), "obj": block[OBJ_INDEX : OBJ_INDEX + 1].copy(), "cls": block[CLS_START:].copy()}
                )
        if start != len(flat):
            raise ValueError("flat tensor does not match layout")
        return outputs


def head_layout(num_classes: int, kind: str, spec: FpnSpec) -> HeadLayout:
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    shapes = tuple(spec.grid_shape(lvl) for lvl in range(spec.num_levels))
    if kind == "coupled":
        planes = (("pred", BOX_DIMS + 1 + num_classes),)
    elif kind == "decoupled":
        planes = (("reg", BOX_DIMS), ("obj", 1), ("cls", num_classes))
    else:
        raise ValueError(f"unknown head kind {kind!r}")
    return HeadLayout(kind, num_classes, shapes, planes)
