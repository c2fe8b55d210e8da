"""Run configuration: typed dataclasses plus a flat ``key = value`` file format.

Precedence when building a run configuration is flags > file > defaults.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

MAPPING_NETWORKS = ("mlp", "transformer")
INTEGRATIONS = ("cat_only", "map_only", "cat_and_map")


@dataclass
class ModelConfig:
    image_height: int = 96
    image_width: int = 128
    feature_dim: int = 64
    stride: int = 4
    encoder_width: int = 32
    encoder_seed: int = 0
    max_text_len: int = 32
    text_layers: int = 2
    text_heads: int = 4
    num_learnable_tokens: int = 8
    num_mapped_tokens: int = 4
    token_dim: int = 64
    mapping_network: str = "mlp"
    mapping_hidden: int = 128
    self_layers: int = 6
    cross_layers: int = 6
    heads: int = 4
    ffn_mult: int = 4
    integration: str = "cat_and_map"
    decoder_enabled: bool = True
    share_tokens_across_clip: bool = False
    window_len: int = 8
    window_overlap: int = 4
    refine_iters: int = 4
    corr_radius: int = 3
    pyramid_levels: int = 2
    visibility_threshold: float = 0.5
    update_hidden: int = 128

    def validate(self) -> "ModelConfig":
        if self.image_height < 8 or self.image_width < 8:
            raise ConfigError("image_height and image_width must be >= 8")
        if self.stride not in (1, 2, 4):
            raise ConfigError(f"stride must be 1, 2 or 4, got {self.stride}")
        for name in ("feature_dim", "token_dim", "num_mapped_tokens", "heads",
                     "text_heads", "window_len", "pyramid_levels", "max_text_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("num_learnable_tokens", "self_layers", "cross_layers",
                     "refine_iters", "corr_radius", "text_layers"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.mapping_network not in MAPPING_NETWORKS:
            raise ConfigError(f"mapping_network must be one of {MAPPING_NETWORKS}")
        if self.integration not in INTEGRATIONS:
            raise ConfigError(f"integration must be one of {INTEGRATIONS}")
        if self.feature_dim % self.heads or self.feature_dim % self.text_heads:
            raise ConfigError("feature_dim must be divisible by heads and text_heads")
        if self.num_learnable_tokens + self.num_mapped_tokens > self.max_text_len:
            raise ConfigError("token count exceeds max_text_len")
        if not 0 <= self.window_overlap < self.window_len:
            raise ConfigError("window_overlap must lie in [0, window_len)")
        if not 0.0 < self.visibility_threshold < 1.0:
            raise ConfigError("visibility_threshold must lie in (0, 1)")
        return self


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 1e-4
    iterations: int = 2000
    tracks_per_batch: int = 64
    frame_intervals: tuple = (1, 2, 3)
    batch_size: int = 1
    clip_len: int = 24
    seed: int = 0
    lambda_vis: float = 1.0
    occluded_weight: float = 0.2
    iter_gamma: float = 0.8
    warmup_steps: int = 100
    grad_clip: float = 1.0
    log_every: int = 50

    def validate(self) -> "TrainConfig":
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.tracks_per_batch < 1:
            raise ConfigError("tracks_per_batch must be >= 1")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if not self.frame_intervals or any(int(s) < 1 for s in self.frame_intervals):
            raise ConfigError("frame_intervals must be a non-empty set of positive ints")
        if self.clip_len < 2:
            raise ConfigError("clip_len must be >= 2")
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        return self

    def to_flat(self) -> dict:
        out = dataclasses.asdict(self.model)
        out.update(dataclasses.asdict(self.train))
        return out

    def replace(self, **overrides) -> "RunConfig":
        return apply_overrides(self, overrides)


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _coerce(key: str, value: Any, typ) -> Any:
    try:
        if typ is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            if isinstance(value, bool):
                raise ValueError(value)
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if typ is float:
            return float(value)
        if typ is tuple:
            if isinstance(value, str):
                parts = [p for p in value.replace(",", " ").split() if p]
                return tuple(int(p) for p in parts)
            return tuple(int(v) for v in value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key!r}: {value!r}") from None


def apply_overrides(cfg: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Return a copy of ``cfg`` with flat ``key -> value`` overrides applied."""
    model_types = _field_types(ModelConfig)
    train_types = _field_types(TrainConfig)
    m = dataclasses.replace(cfg.model)
    t = dataclasses.replace(cfg.train)
    for key, value in overrides.items():
        if key in model_types:
            setattr(m, key, _coerce(key, value, model_types[key]))
        elif key in train_types:
            setattr(t, key, _coerce(key, value, train_types[key]))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return RunConfig(model=m, train=t).validate()


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def load_config(path, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = parse_config_text(path.read_text(), source=str(path))
    if overrides:
        values.update(overrides)
    return apply_overrides(RunConfig(), values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.to_flat().items():
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
