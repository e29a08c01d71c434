"""Anchor-free detection head toolkit: dynamic top-k label assignment, losses,
augmentation, post-processing and evaluation on numpy arrays."""

from .assigner import AssignerConfig, Assignment, CostMatrix, simota_assign, sinkhorn_ot
from .geometry import BBox, LabeledBox, giou, iou
from .gridhead import AnchorGrid, FpnSpec, build_anchors, decode, encode

__version__ = "0.1.0"

__all__ = [
    "AnchorGrid",
    "AssignerConfig",
    "Assignment",
    "BBox",
    "CostMatrix",
    "FpnSpec",
    "LabeledBox",
    "build_anchors",
    "decode",
    "encode",
    "giou",
    "iou",
    "simota_assign",
    "sinkhorn_ot",
]
