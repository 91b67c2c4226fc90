"""Model configuration and its plain-text ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError
from .kernels import resolve_dtype

MODES = ("frame", "sequence")
PYRAMID_STRIDES = (4, 8, 16, 32)


@dataclass(frozen=True)
class ModelConfig:
    image_h: int = 32
    image_w: int = 32
    patch: int = 4
    channels: int = 32
    layers: int = 4
    stages: int = 4
    heads: int = 4
    window: Optional[int] = 4
    memory_capacity: Optional[int] = 8
    fusion_init: float = 1e-4
    mode: str = "frame"
    mlp_ratio: int = 4
    ln_eps: float = 1e-6
    temporal_pos_embed: bool = False
    adaptor_channels: Optional[tuple[int, int, int, int]] = None
    decoder_layers: int = 4
    decoder_pos_embed: bool = True
    decoder_max_frames: int = 64
    num_classes: int = 10
    seed: int = 0
    dtype: str = "f64"

    def __post_init__(self):
        for name in ("image_h", "image_w", "patch", "channels", "layers", "stages", "heads", "mlp_ratio",
                     "decoder_layers", "decoder_max_frames", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch}")
        if self.layers % self.stages:
            raise ConfigError(f"layers={self.layers} not divisible by stages={self.stages}")
        if self.channels % self.heads:
            raise ConfigError(f"heads={self.heads} must divide channels={self.channels}")
        if self.window is not None and self.window < 1:
            raise ConfigError(f"window must be positive, got {self.window}")
        if self.memory_capacity is not None and self.memory_capacity < 1:
            raise ConfigError(f"memory_capacity must be >= 1, got {self.memory_capacity}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.temporal_pos_embed and self.memory_capacity is None:
            raise ConfigError("temporal_pos_embed needs a finite memory_capacity")
        if self.adaptor_channels is not None and len(self.adaptor_channels) != 4:
            raise ConfigError("adaptor_channels needs one width per pyramid level")
        resolve_dtype(self.dtype)
        if self.mode == "frame":
            for s in PYRAMID_STRIDES:
                if self.image_h % s or self.image_w % s:
                    raise ConfigError(f"image {self.image_h}x{self.image_w} not divisible by pyramid stride {s}")
                ratio = self.patch / s
                if ratio > 1 and ratio not in (2, 4):
                    raise ConfigError(f"patch {self.patch} needs a x{ratio:g} upsampling for stride {s}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch, self.image_w // self.patch

    @property
    def np_dtype(self) -> np.dtype:
        return resolve_dtype(self.dtype)

    @property
    def layers_per_stage(self) -> int:
        return self.layers // self.stages

    @property
    def hidden(self) -> int:
        return self.mlp_ratio * self.channels

    @property
    def effective_window(self) -> Optional[int]:
        """Spatial attention window; sequence-task models attend globally."""
        return self.window if self.mode == "frame" else None

    @property
    def level_channels(self) -> tuple[int, int, int, int]:
        return self.adaptor_channels or (self.channels,) * 4

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def desk_config(**overrides) -> ModelConfig:
    """The small configuration the test suites run on."""
    return ModelConfig(**overrides)


def paper_config(**overrides) -> ModelConfig:
    """ViT-B/16 at 224x224 split into four stages, as used for action recognition."""
    base = dict(
        image_h=224, image_w=224, patch=16, channels=768, layers=12, stages=4, heads=12,
        window=14, memory_capacity=None, mode="sequence", num_classes=400,
    )
    base.update(overrides)
    return ModelConfig(**base)


# -- text format ----------------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}


def _format_value(name: str, value) -> str:
    if value is None:
        return "inf" if name == "memory_capacity" else "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name: str, text: str, lineno: int):
    default = _FIELDS[name].default
    low = text.lower()
    try:
        if name == "memory_capacity":
            return None if low in ("inf", "none", "unbounded") else int(text)
        if name == "window":
            return None if low == "none" else int(text)
        if name == "adaptor_channels":
            return None if low == "none" else tuple(int(v) for v in text.split(","))
        if isinstance(default, bool):
            if low not in ("true", "false"):
                raise ValueError(text)
            return low == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {text!r} for {name}") from None


def parse_config(text: str) -> ModelConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = _parse_value(key, value, lineno)
    return ModelConfig(**values)


def format_config(config: ModelConfig) -> str:
    return "".join(f"{name} = {_format_value(name, getattr(config, name))}\n" for name in _FIELDS)


def load_config(path) -> ModelConfig:
    return parse_config(Path(path).read_text())


def save_config(config: ModelConfig, path) -> None:
    Path(path).write_text(format_config(config))
