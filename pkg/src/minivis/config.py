"""Dataclass configs and the flat ``section.key = value`` config-file format.

Every tunable lives in one of four dataclasses (generator, model, training,
inference). Config files are plain text, one ``section.key = value`` per line;
unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

LEVELS = ("P3", "P4", "P5", "P6", "P7")
STRIDES = {"P3": 8, "P4": 16, "P5": 32, "P6": 64, "P7": 128}

BASE_LEVEL_CHOICES = {
    "P3": ("P3",),
    "P3-P4": ("P3", "P4"),
    "P3-P5": ("P3", "P4", "P5"),
}


class ConfigError(ValueError):
    """Invalid configuration value or unknown config key."""


@dataclass
class GeneratorConfig:
    """Synthetic-video generator settings."""

    num_frames: int = 8
    height: int = 128
    width: int = 128
    num_shapes: int = 3
    num_classes: int = 3
    min_size: float = 22.0
    max_size: float = 52.0
    min_speed: float = 0.5
    max_speed: float = 3.0
    jitter: float = 0.0
    # Fixed velocity applied to every shape; overrides the speed range.
    fixed_velocity: Optional[Tuple[float, float]] = None
    # Minimum pairwise center distance enforced at placement (0 = off).
    min_separation: float = 0.0
    fps: float = 8.0

    def validate(self) -> None:
        if self.height % 128 != 0:
            raise ConfigError(f"height {self.height} not divisible by 128")
        if self.width % 128 != 0:
            raise ConfigError(f"width {self.width} not divisible by 128")
        if self.num_frames < 2:
            raise ConfigError("num_frames must be >= 2")
        if not (1 <= self.num_shapes <= 8):
            raise ConfigError("num_shapes must be in [1, 8]")
        if not (1 <= self.num_classes <= 3):
            raise ConfigError("num_classes must be in [1, 3]")
        if self.min_size < 4 or self.max_size < self.min_size:
            raise ConfigError("shape size range invalid")
        if self.jitter < 0:
            raise ConfigError("jitter must be >= 0")


@dataclass
class ModelConfig:
    """Network architecture and mask-head knobs."""

    num_classes: int = 3
    feat_channels: int = 64
    trunk_channels: int = 128
    tower_convs: int = 2
    # Maximum sub-region divisions per axis; the canonical channel grid is
    # division_cap x division_cap.
    division_cap: int = 6
    # Pixels per division step: r = min(cap, ceil(extent / division_unit)).
    division_unit: float = 10.0
    # Bilinear upsampling of base-mask features from stride 8.
    upsample_factor: int = 4
    base_feature_levels: str = "P3-P5"
    center_sampling: bool = False
    center_sampling_radius: float = 1.5
    # Per-level (lo, hi] bounds on max(l,t,r,b) for target assignment,
    # scaled for 128px inputs.
    level_ranges: Tuple[Tuple[float, float], ...] = (
        (0.0, 16.0),
        (16.0, 32.0),
        (32.0, 64.0),
        (64.0, 128.0),
        (128.0, math.inf),
    )

    @property
    def mask_stride(self) -> int:
        return STRIDES["P3"] // self.upsample_factor

    @property
    def num_bases(self) -> int:
        return self.division_cap * self.division_cap

    def base_levels(self) -> Tuple[str, ...]:
        return BASE_LEVEL_CHOICES[self.base_feature_levels]

    def validate(self) -> None:
        if self.division_cap not in (2, 4, 6, 8):
            raise ConfigError(f"division_cap must be one of 2/4/6/8, got {self.division_cap}")
        if self.division_unit < 1.0:
            raise ConfigError("division_unit must be >= 1 pixel")
        if self.upsample_factor not in (1, 2, 4):
            raise ConfigError(f"upsample_factor must be one of 1/2/4, got {self.upsample_factor}")
        if self.base_feature_levels not in BASE_LEVEL_CHOICES:
            raise ConfigError(f"base_feature_levels must be one of {sorted(BASE_LEVEL_CHOICES)}")
        if len(self.level_ranges) != len(LEVELS):
            raise ConfigError("level_ranges must have one (lo, hi] pair per pyramid level")


@dataclass
class TrainConfig:
    """Optimizer recipe and loop settings."""

    learning_rate: float = 0.005
    momentum: float = 0.9
    # Exponential lr factor applied once per epoch (one pass over the videos).
    decay: float = 0.995
    steps: int = 2000
    clip_length: int = 8
    # Consecutive frame pairs per step; capped at clip_length - 1.
    batch_pairs: int = 7
    weight_cls: float = 1.0
    weight_cent: float = 1.0
    weight_box: float = 1.0
    weight_mask: float = 1.0
    weight_track: float = 1.0
    track_warmup_steps: int = 200
    grad_clip_norm: float = 10.0
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 500

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not (0.0 < self.decay <= 1.0):
            raise ConfigError("decay must be in (0, 1]")
        if self.clip_length < 2:
            raise ConfigError("clip_length must be >= 2")
        if self.batch_pairs < 1:
            raise ConfigError("batch_pairs must be >= 1")


@dataclass
class InferConfig:
    """Decoding and association settings."""

    score_threshold: float = 0.3
    nms_iou: float = 0.6
    top_k: int = 10
    # Radius source for association: current detection's box or the
    # tracklet's last box.
    match_radius_source: str = "detection"
    # Tracklets unmatched for more than this many frames are retired.
    tracklet_max_age: int = 4

    def validate(self) -> None:
        if not (0.0 < self.score_threshold < 1.0):
            raise ConfigError("score_threshold must be in (0, 1)")
        if not (0.0 < self.nms_iou < 1.0):
            raise ConfigError("nms_iou must be in (0, 1)")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.match_radius_source not in ("detection", "tracklet"):
            raise ConfigError("match_radius_source must be 'detection' or 'tracklet'")


@dataclass
class Config:
    gen: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    def validate(self) -> None:
        self.gen.validate()
        self.model.validate()
        self.train.validate()
        self.infer.validate()


_SECTIONS = {"gen": GeneratorConfig, "model": ModelConfig, "train": TrainConfig, "infer": InferConfig}

# Fields that cannot be set from a flat config file.
_FILE_EXCLUDED = {("model", "level_ranges")}


def _parse_scalar(text: str, ftype, key: str):
    text = text.strip()
    if ftype is int:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected integer, got {text!r}") from None
    if ftype is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected number, got {text!r}") from None
    if ftype is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected boolean, got {text!r}")
    if ftype is str:
        return text
    if ftype == Optional[Tuple[float, float]]:
        if text.lower() in ("none", ""):
            return None
        parts = text.split(",")
        if len(parts) != 2:
            raise ConfigError(f"{key}: expected 'vx,vy' or 'none', got {text!r}")
        return (float(parts[0]), float(parts[1]))
    raise ConfigError(f"{key}: unsupported field type {ftype}")


# dataclasses stores annotations as strings under `from __future__ import
# annotations`; resolve them once.
_FIELD_TYPES = {}
for _sect, _cls in _SECTIONS.items():
    for _name, _hint in typing.get_type_hints(_cls).items():
        _FIELD_TYPES[(_sect, _name)] = _hint


def config_from_items(items: dict) -> Config:
    """Build a Config from a flat ``{"section.key": "value"}`` mapping."""
    cfg = Config()
    known = {}
    for sect, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            if (sect, f.name) in _FILE_EXCLUDED:
                continue
            known[f"{sect}.{f.name}"] = sect
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        sect = known[key]
        name = key.split(".", 1)[1]
        value = raw
        if isinstance(raw, str):
            value = _parse_scalar(raw, _FIELD_TYPES[(sect, name)], key)
        setattr(getattr(cfg, sect), name, value)
    cfg.validate()
    return cfg


def load_config(path) -> Config:
    """Parse a flat key=value config file into a validated Config."""
    items = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'section.key = value'")
        key, _, value = stripped.partition("=")
        items[key.strip()] = value.strip()
    return config_from_items(items)


def dump_config(cfg: Config) -> str:
    """Render a Config as flat key=value text (the load_config inverse)."""
    lines = []
    for sect in _SECTIONS:
        obj = getattr(cfg, sect)
        for f in dataclasses.fields(obj):
            if (sect, f.name) in _FILE_EXCLUDED:
                continue
            value = getattr(obj, f.name)
            if value is None:
                value = "none"
            elif isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{sect}.{f.name} = {value}")
    return "\n".join(lines) + "\n"
