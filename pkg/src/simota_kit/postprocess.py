"""Score filtering, class-wise greedy NMS and the NMS-free decode path."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import BBox, pairwise_iou
from .gridhead import CLS_START, OBJ_INDEX, AnchorGrid, decode_boxes, sigmoid


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    score: float
    anchor_index: int = -1

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def sort_key(self) -> tuple[float, int]:
        return (-self.score, self.anchor_index)

    def to_json(self) -> dict:
        x1, y1, x2, y2 = self.box.corners()
        return {"x1": x1, "y1": y1, "x2": x2, "y2": y2, "class_id": self.class_id,
                "score": self.score, "anchor_index": self.anchor_index}

    @classmethod
    def from_json(cls, rec: dict) -> "Detection":
        box = BBox.from_corners(float(rec["x1"]), float(rec["y1"]), float(rec["x2"]), float(rec["y2"]))
        return cls(box, int(rec["class_id"]), float(rec["score"]), int(rec.get("anchor_index", -1)))


def score_filter(dets: Sequence[Detection], threshold: float) -> list[Detection]:
    return [d for d in dets if d.score > threshold]


def nms_greedy(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Class-wise greedy NMS; equal scores are ordered by anchor_index."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must be in (0, 1)")
    keep: list[Detection] = []
    classes = sorted({d.class_id for d in dets})
    for c in classes:
        group = sorted((d for d in dets if d.class_id == c), key=Detection.sort_key)
        boxes = np.array([d.box.as_array() for d in group])
        overlaps = pairwise_iou(boxes, boxes)
        alive = np.ones(len(group), dtype=bool)
        for i in range(len(group)):
            if not alive[i]:
                continue
            keep.append(group[i])
            alive[i + 1 :] &= overlaps[i, i + 1 :] <= iou_threshold
    keep.sort(key=Detection.sort_key)
    return keep


def nms_reference(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """The greedy rule stated literally: pick the best remaining, drop its overlaps, repeat.

    No pre-sorting; each round scans all remaining detections for the maximum.
    """
    dets = list(dets)
    if not dets:
        return []
    # corners computed here rather than through pairwise_iou, so the oracle shares no IoU code with nms_greedy
    x1 = np.array([d.box.cx - d.box.w / 2 for d in dets])
    y1 = np.array([d.box.cy - d.box.h / 2 for d in dets])
    x2 = np.array([d.box.cx + d.box.w / 2 for d in dets])
    y2 = np.array([d.box.cy + d.box.h / 2 for d in dets])
    area = (x2 - x1) * (y2 - y1)
    scores = np.array([d.score for d in dets])
    anchor = np.array([d.anchor_index for d in dets])
    classes = np.array([d.class_id for d in dets])
    remaining = np.ones(len(dets), dtype=bool)
    keep = []
    while remaining.any():
        top = scores == scores[remaining].max()
        cands = np.flatnonzero(remaining & top)
        best = int(cands[np.argmin(anchor[cands])])
        keep.append(dets[best])
        remaining[best] = False
        same = np.flatnonzero(remaining & (classes == classes[best]))
        iw = np.maximum(0.0, np.minimum(x2[best], x2[same]) - np.maximum(x1[best], x1[same]))
        ih = np.maximum(0.0, np.minimum(y2[best], y2[same]) - np.maximum(y1[best], y1[same]))
        inter = iw * ih
        overlaps = inter / (area[best] + area[same] - inter)
        remaining[same[overlaps > iou_threshold]] = False
    keep.sort(key=Detection.sort_key)
    return keep


def detections_from_raw(preds: np.ndarray, anchors: AnchorGrid) -> list[Detection]:
    """One detection per anchor: its best class, scored obj_prob * cls_prob."""
    preds = np.asarray(preds, dtype=np.float64)
    boxes = decode_boxes(preds, anchors)
    obj = sigmoid(preds[:, OBJ_INDEX])
    cls = sigmoid(preds[:, CLS_START:])
    best = np.argmax(cls, axis=1)
    scores = obj * cls[np.arange(len(preds)), best]
    return [
        Detection(BBox(*boxes[j]), int(best[j]), float(scores[j]), j)
        for j in range(len(preds))
    ]


def decode_nmsfree(preds: np.ndarray, anchors: AnchorGrid, score_threshold: float) -> list[Detection]:
    dets = score_filter(detections_from_raw(preds, anchors), score_threshold)
    dets.sort(key=Detection.sort_key)
    return dets


def decode_with_nms(preds: np.ndarray, anchors: AnchorGrid, score_threshold: float,
                    iou_threshold: float = 0.65) -> list[Detection]:
    return nms_greedy(score_filter(detections_from_raw(preds, anchors), score_threshold), iou_threshold)
