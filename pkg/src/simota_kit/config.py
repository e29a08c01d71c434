"""Run configuration: one JSON object with fpn / assigner / augment / fit / loss sections.

Precedence is CLI flags over the config file over the dataclass defaults.
Unknown keys are rejected with the dotted path of the offending key. The
top-level ``seed`` is the only seed; it is copied into the augment and fit
sections when the config is resolved.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Union

from .assigner import AssignerConfig
from .augment import PRESETS, AugConfig
from .gridhead import FpnSpec
from .losses import LossWeights
from .synthfit import FitConfig

U64_MAX = 2**64 - 1


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def _section_keys(cls, exclude=()) -> set[str]:
    return {f.name for f in fields(cls)} - set(exclude)


# keys accepted in each section of the file, with aliases mapped to field names
_ALIASES = {"assigner": {"lambda": "lam"}}
_SECTIONS = {
    "fpn": (FpnSpec, ()),
    "assigner": (AssignerConfig, ()),
    "augment": (AugConfig, ("seed",)),
    "fit": (FitConfig, ("seed",)),
    "loss": (LossWeights, ()),
}
_TOP_LEVEL = {"seed", "num_classes", "preset", *_SECTIONS}


def _json_scale_ranges(ranges) -> list:
    # JSON has no infinity; an open upper end is written as null
    return [[lo, None if math.isinf(hi) else hi] for lo, hi in ranges]


def _parse_scale_ranges(value, where: str) -> tuple:
    if not isinstance(value, list):
        raise ConfigError(f"{where}: expected a list of [lo, hi] pairs")
    out = []
    for i, pair in enumerate(value):
        if not isinstance(pair, list) or len(pair) != 2:
            raise ConfigError(f"{where}[{i}]: expected [lo, hi]")
        lo, hi = pair
        out.append((float(lo), math.inf if hi is None else float(hi)))
    return tuple(out)


@dataclass(frozen=True)
class RunConfig:
    fpn: FpnSpec = field(default_factory=FpnSpec)
    assigner: AssignerConfig = field(default_factory=AssignerConfig)
    augment: AugConfig = field(default_factory=AugConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    num_classes: int = 3
    preset: Optional[str] = None

    def __post_init__(self) -> None:
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed <= U64_MAX:
            raise ConfigError(f"seed: expected an integer in [0, 2^64), got {self.seed!r}")
        if self.num_classes < 1:
            raise ConfigError("num_classes: must be >= 1")
        if self.preset is not None and self.preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        object.__setattr__(self, "augment", replace(self.augment, seed=self.seed))
        object.__setattr__(self, "fit", replace(self.fit, seed=self.seed))

    def to_json(self) -> dict:
        fpn = asdict(self.fpn)
        fpn["scale_ranges"] = _json_scale_ranges(self.fpn.scale_ranges)
        sections = {"fpn": fpn}
        for name in ("assigner", "augment", "fit", "loss"):
            d = asdict(getattr(self, name))
            d.pop("seed", None)
            sections[name] = d
        for d in sections.values():
            for k, v in d.items():
                if isinstance(v, tuple):
                    d[k] = list(v)
        return {**sections, "seed": self.seed, "num_classes": self.num_classes, "preset": self.preset}


def _build_section(name: str, raw: Any, base):
    cls, exclude = _SECTIONS[name]
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    allowed = _section_keys(cls, exclude)
    aliases = _ALIASES.get(name, {})
    kwargs = {}
    for key, value in raw.items():
        target = aliases.get(key, key)
        if target not in allowed:
            raise ConfigError(f"{name}.{key}: unknown key")
        if target in kwargs:
            raise ConfigError(f"{name}.{key}: given twice (alias of {target})")
        if name == "fpn" and target == "scale_ranges":
            value = _parse_scale_ranges(value, f"{name}.{key}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[target] = value
    try:
        return replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def from_dict(data: Any, overrides: Optional[dict] = None) -> RunConfig:
    """Build a RunConfig from parsed JSON plus CLI overrides.

    ``overrides`` may hold ``seed``, ``preset`` and ``assigner``; a preset
    replaces the augment scale range and mixup switch from the file.
    """
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object at the top level")
    for key in data:
        if key not in _TOP_LEVEL:
            raise ConfigError(f"{key}: unknown key")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    defaults = RunConfig()
    sections = {name: _build_section(name, data.get(name, {}), getattr(defaults, name)) for name in _SECTIONS}

    preset_name = overrides.get("preset", data.get("preset"))
    if preset_name is not None:
        if preset_name not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
        sections["augment"] = replace(sections["augment"], **PRESETS[preset_name])
    if "assigner" in overrides:
        try:
            sections["fit"] = replace(sections["fit"], assigner=overrides["assigner"])
        except ValueError as exc:
            raise ConfigError(f"--assigner: {exc}") from exc

    seed = overrides.get("seed", data.get("seed", 0))
    num_classes = data.get("num_classes", 3)
    if not isinstance(num_classes, int) or isinstance(num_classes, bool):
        raise ConfigError("num_classes: expected an integer")
    return RunConfig(seed=seed, num_classes=num_classes, preset=preset_name, **sections)


def load(path: Optional[Union[str, Path]] = None, overrides: Optional[dict] = None) -> RunConfig:
    if path is None:
        return from_dict({}, overrides)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}") from exc
    return from_dict(data, overrides)
