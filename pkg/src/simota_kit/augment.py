"""Mosaic, scale-jittered MixUp, horizontal flip and color jitter on Scenes.

Every operation returns an :class:`AugResult` recording, for each output
box, which input box it came from, the affine that mapped it and the
rectangle it was clipped to, so box bookkeeping can be replayed exactly.

Randomness comes from named child streams of the caller's SplitMix64:

* mosaic: ``mosaic.center`` (x, then y), ``mosaic.scale`` (one per input,
  in input order), ``mosaic.crop`` (x, then y; only for uniform crops)
* mixup: ``mixup.scale`` (a, then b), ``mixup.blend``
* hflip: ``flip``
* color_jitter: ``color`` (brightness, then contrast)
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal, Optional, Sequence

import numpy as np

from .geometry import MIN_BOX_AREA, MIN_BOX_SIDE, Affine2D, BBox, LabeledBox, apply_affine, clip_to_rect
from .rng import SplitMix64

MIN_SCENE_SIDE = 32


@dataclass(frozen=True)
class Scene:
    image: np.ndarray  # (H, W, 3) uint8
    gts: tuple[LabeledBox, ...] = ()
    id: str = ""

    def __post_init__(self) -> None:
        img = self.image
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise ValueError("scene image must be an (H, W, 3) uint8 array")
        if img.shape[0] < MIN_SCENE_SIDE or img.shape[1] < MIN_SCENE_SIDE:
            raise ValueError(f"scene must be at least {MIN_SCENE_SIDE}x{MIN_SCENE_SIDE}, got {img.shape[:2]}")
        object.__setattr__(self, "gts", tuple(self.gts))
        for i, g in enumerate(self.gts):
            b = g.box
            if b.x2 <= 0 or b.y2 <= 0 or b.x1 >= self.width or b.y1 >= self.height:
                raise ValueError(f"gt {i} does not intersect the {self.width}x{self.height} canvas")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass(frozen=True)
class AugConfig:
    scale_jitter: tuple[float, float] = (0.5, 1.5)
    mixup_enabled: bool = False
    mixup_blend: tuple[float, float] = (0.4, 0.6)
    flip_prob: float = 0.5
    color_jitter: tuple[float, float] = (20.0, 0.2)  # (brightness +-, contrast +-)
    seed: int = 0
    mosaic_center_jitter: float = 0.25
    mosaic_crop: Literal["uniform", "center"] = "uniform"
    fill_value: int = 114
    min_box_area: float = MIN_BOX_AREA
    min_box_side: float = MIN_BOX_SIDE

    def __post_init__(self) -> None:
        object.__setattr__(self, "scale_jitter", tuple(float(v) for v in self.scale_jitter))
        object.__setattr__(self, "mixup_blend", tuple(float(v) for v in self.mixup_blend))
        object.__setattr__(self, "color_jitter", tuple(float(v) for v in self.color_jitter))
        lo, hi = self.scale_jitter
        if not 0 < lo <= hi:
            raise ValueError("scale_jitter needs 0 < lo <= hi")
        blo, bhi = self.mixup_blend
        if not 0 < blo <= bhi < 1:
            raise ValueError("mixup_blend must lie inside (0, 1)")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must be in [0, 1]")
        if min(self.color_jitter) < 0:
            raise ValueError("color jitter ranges must be >= 0")
        if not 0 <= self.mosaic_center_jitter <= 0.5:
            raise ValueError("mosaic_center_jitter must be in [0, 0.5]")
        if self.mosaic_crop not in ("uniform", "center"):
            raise ValueError(f"unknown mosaic_crop {self.mosaic_crop!r}")


# model-size presets: small models drop mixup and narrow the mosaic scale range
PRESETS = {
    "small": {"scale_jitter": (0.5, 1.5), "mixup_enabled": False},
    "large": {"scale_jitter": (0.1, 2.0), "mixup_enabled": True},
}


def preset(name: str, **overrides) -> AugConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return AugConfig(**{**PRESETS[name], **overrides})


@dataclass(frozen=True)
class BoxProvenance:
    source: int  # index of the input scene
    gt_index: int  # index of the box within that scene
    affine: Affine2D
    clip: tuple[float, float, float, float]  # x1, y1, x2, y2 in output coordinates

    def to_json(self) -> dict:
        return {"source": self.source, "gt_index": self.gt_index,
                "affine": self.affine.as_list(), "clip": list(self.clip)}


@dataclass
class AugResult:
    scene: Scene
    provenance: list[BoxProvenance]
    params: dict = field(default_factory=dict)
    # boxes before clipping, one per input box, for bookkeeping checks
    mapped_count: int = 0

    def to_json(self) -> dict:
        return {"params": self.params, "mapped_count": self.mapped_count,
                "boxes": [p.to_json() for p in self.provenance]}


def replay(result: AugResult, inputs: Sequence[Scene], cfg: AugConfig) -> list[BBox]:
    """Re-derive the output boxes from the inputs and the recorded transforms."""
    out = []
    for p in result.provenance:
        src = inputs[p.source].gts[p.gt_index].box
        box = clip_to_rect(apply_affine(p.affine, src), *p.clip, cfg.min_box_area, cfg.min_box_side)
        if box is None:
            raise AssertionError("recorded box vanishes on replay")
        out.append(box)
    return out


def resize_nearest(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize sampling source pixel floor((i + 0.5) * in / out)."""
    h, w = image.shape[:2]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return image[rows[:, None], cols[None, :]]


def _scaled_size(scene: Scene, s: float) -> tuple[int, int]:
    return max(1, int(round(scene.height * s))), max(1, int(round(scene.width * s)))


def _map_boxes(scenes: Sequence[Scene], transforms: Sequence[tuple[Affine2D, tuple]], cfg: AugConfig):
    gts, prov = [], []
    mapped = 0
    for si, (scene, (affine, rect)) in enumerate(zip(scenes, transforms)):
        for gi, g in enumerate(scene.gts):
            mapped += 1
            box = clip_to_rect(apply_affine(affine, g.box), *rect, cfg.min_box_area, cfg.min_box_side)
            if box is None:
                continue
            gts.append(LabeledBox(box, g.class_id))
            prov.append(BoxProvenance(si, gi, affine, tuple(float(v) for v in rect)))
    return gts, prov, mapped


def mosaic(
    scenes: Sequence[Scene],
    out_size: tuple[int, int],
    cfg: AugConfig,
    rng: SplitMix64,
    scene_id: str = "mosaic",
) -> AugResult:
    """Tile four scenes around a jittered center of a 2H x 2W workspace, then crop H x W.

    Input 0 sits top-left of the center point, 1 top-right, 2 bottom-left,
    3 bottom-right; each is rescaled by its own factor from scale_jitter.
    """
    if len(scenes) != 4:
        raise ValueError(f"mosaic needs exactly 4 scenes, got {len(scenes)}")
    out_h, out_w = out_size
    ws_h, ws_w = 2 * out_h, 2 * out_w
    workspace = np.full((ws_h, ws_w, 3), cfg.fill_value, dtype=np.uint8)

    c_rng = rng.child("mosaic.center")
    j = cfg.mosaic_center_jitter
    xc = int(round(c_rng.uniform((0.5 - j) * ws_w, (0.5 + j) * ws_w)))
    yc = int(round(c_rng.uniform((0.5 - j) * ws_h, (0.5 + j) * ws_h)))

    if cfg.mosaic_crop == "uniform":
        crop_rng = rng.child("mosaic.crop")
        cx0 = crop_rng.randint(0, ws_w - out_w)
        cy0 = crop_rng.randint(0, ws_h - out_h)
    else:
        cx0 = min(max(xc - out_w // 2, 0), ws_w - out_w)
        cy0 = min(max(yc - out_h // 2, 0), ws_h - out_h)

    s_rng = rng.child("mosaic.scale")
    transforms = []
    scales = []
    for i, scene in enumerate(scenes):
        s = s_rng.uniform(*cfg.scale_jitter)
        scales.append(s)
        nh, nw = _scaled_size(scene, s)
        x0 = xc - nw if i in (0, 2) else xc
        y0 = yc - nh if i in (0, 1) else yc
        px1, py1 = max(x0, 0), max(y0, 0)
        px2, py2 = min(x0 + nw, ws_w), min(y0 + nh, ws_h)
        if px2 > px1 and py2 > py1:
            resized = resize_nearest(scene.image, nh, nw)
            workspace[py1:py2, px1:px2] = resized[py1 - y0 : py2 - y0, px1 - x0 : px2 - x0]
        affine = (Affine2D.scaling(nw / scene.width, nh / scene.height)
                  .then(Affine2D.translation(x0 - cx0, y0 - cy0)))
        rect = (max(px1 - cx0, 0), max(py1 - cy0, 0), min(px2 - cx0, out_w), min(py2 - cy0, out_h))
        transforms.append((affine, rect))

    image = workspace[cy0 : cy0 + out_h, cx0 : cx0 + out_w].copy()
    gts, prov, mapped = _map_boxes(scenes, transforms, cfg)
    params = {"center": [xc, yc], "crop": [cx0, cy0], "scales": scales}
    return AugResult(Scene(image, tuple(gts), scene_id), prov, params, mapped)


def mixup(
    a: Scene,
    b: Scene,
    cfg: AugConfig,
    rng: SplitMix64,
    beta: Optional[float] = None,
    scales: Optional[tuple[float, float]] = None,
    scene_id: str = "mixup",
) -> AugResult:
    """Blend two independently rescaled scenes; labels are the union of both.

    Each image is scaled about its top-left corner and pasted on a canvas of
    the common size, then ``out = round_half_up(beta * a + (1 - beta) * b)``.
    ``beta`` and ``scales`` override the random draws.
    """
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError("mixup inputs must share a canvas size")
    h, w = a.height, a.width
    s_rng = rng.child("mixup.scale")
    drawn = (s_rng.uniform(*cfg.scale_jitter), s_rng.uniform(*cfg.scale_jitter))
    sa, sb = scales if scales is not None else drawn
    blend = rng.child("mixup.blend").uniform(*cfg.mixup_blend)
    beta = blend if beta is None else float(beta)

    layers, transforms = [], []
    for scene, s in ((a, sa), (b, sb)):
        nh, nw = _scaled_size(scene, s)
        canvas = np.full((h, w, 3), cfg.fill_value, dtype=np.uint8)
        ch, cw = min(nh, h), min(nw, w)
        canvas[:ch, :cw] = resize_nearest(scene.image, nh, nw)[:ch, :cw]
        layers.append(canvas.astype(np.float64))
        transforms.append((Affine2D.scaling(nw / scene.width, nh / scene.height), (0, 0, cw, ch)))

    blended = np.floor(beta * layers[0] + (1.0 - beta) * layers[1] + 0.5)
    image = np.clip(blended, 0, 255).astype(np.uint8)
    gts, prov, mapped = _map_boxes((a, b), transforms, cfg)
    params = {"scales": [sa, sb], "beta": beta}
    return AugResult(Scene(image, tuple(gts), scene_id), prov, params, mapped)


def hflip(s: Scene, rng: SplitMix64, cfg: AugConfig, force: Optional[bool] = None) -> AugResult:
    flip = rng.child("flip").bernoulli(cfg.flip_prob)
    if force is not None:
        flip = force
    affine = Affine2D.hflip(s.width) if flip else Affine2D.identity()
    image = s.image[:, ::-1].copy() if flip else s.image.copy()
    gts, prov, mapped = _map_boxes((s,), [(affine, (0, 0, s.width, s.height))], cfg)
    return AugResult(Scene(image, tuple(gts), s.id), prov, {"flipped": bool(flip)}, mapped)


def apply_color(image: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    out = np.floor(contrast * (image.astype(np.float64) - 128.0) + 128.0 + brightness + 0.5)
    return np.clip(out, 0, 255).astype(np.uint8)


def color_jitter(s: Scene, rng: SplitMix64, cfg: AugConfig) -> AugResult:
    c_rng = rng.child("color")
    b_range, c_range = cfg.color_jitter
    brightness = c_rng.uniform(-b_range, b_range)
    contrast = c_rng.uniform(1.0 - c_range, 1.0 + c_range)
    image = apply_color(s.image, brightness, contrast)
    gts, prov, mapped = _map_boxes((s,), [(Affine2D.identity(), (0, 0, s.width, s.height))], cfg)
    return AugResult(Scene(image, tuple(gts), s.id), prov, {"brightness": brightness, "contrast": contrast}, mapped)

