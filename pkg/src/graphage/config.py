"""Plain-text configuration files.

Format: one `key = value` per line, `#` starts a comment, blank lines
are ignored. Keys are dotted (section.field) and map onto the package's
dataclasses; values parse by the field's type. Tuple-valued fields
(grids, cuts) take comma-separated numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data import SyntheticSpec
from .elm import EstimatorConfig
from .errors import ConfigError
from .graphs import AugmentationSpec
from .training import LossWeights, ModelConfig, TrainConfig

__all__ = [
    "Settings",
    "build_settings",
    "config_help",
    "default_config_text",
    "parse_config",
    "settings_from_file",
]


@dataclass
class Settings:
    model: ModelConfig
    train: TrainConfig
    aug: AugmentationSpec
    loss: LossWeights
    elm: EstimatorConfig
    synth: SyntheticSpec

    def as_flat_dict(self) -> dict:
        out = {}
        for section in ("model", "train", "aug", "loss", "elm", "synth"):
            for field_name, value in vars(getattr(self, section)).items():
                out[f"{section}.{field_name}"] = value
        return out


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_float_tuple(raw: str) -> tuple:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(float(p) for p in parts)


def _parse_int_tuple(raw: str) -> tuple:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


# key -> (section, field, converter)
_REGISTRY = {
    "model.image_size": int,
    "model.channels": int,
    "model.patch_size": int,
    "model.knn_k": int,
    "model.feature_dim": int,
    "model.encoder_depth": int,
    "model.decoder_depth": int,
    "model.residual": _parse_bool,
    "model.remask": _parse_bool,
    "model.zero_mask": _parse_bool,
    "model.recompute_knn": _parse_bool,
    "train.epochs": int,
    "train.batch_size": int,
    "train.base_lr": float,
    "train.weight_decay": float,
    "train.warmup_fraction": float,
    "train.queue_capacity": int,
    "train.seed": int,
    "train.optimizer": str,
    "train.sgd_momentum": float,
    "train.deterministic": _parse_bool,
    "train.both_views": _parse_bool,
    "aug.mask_ratio": float,
    "aug.drop_ratio": float,
    "aug.grayscale_prob": float,
    "aug.max_shift": float,
    "aug.seed": int,
    "loss.gamma": float,
    "loss.tau": float,
    "loss.alpha": float,
    "loss.eta": float,
    "loss.mu": float,
    "loss.momentum": float,
    "elm.cuts": _parse_float_tuple,
    "elm.overlap": float,
    "elm.depth": int,
    "elm.seed": int,
    "elm.lam_grid": _parse_float_tuple,
    "elm.hidden_grid": _parse_int_tuple,
    "elm.cv_folds": int,
    "elm.shared_regressor": _parse_bool,
    "elm.use_hidden": _parse_bool,
    "synth.count": int,
    "synth.size": int,
    "synth.seed": int,
    "synth.noise": float,
    "synth.age_min": int,
    "synth.age_max": int,
}

_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "aug": AugmentationSpec,
    "loss": LossWeights,
    "elm": EstimatorConfig,
    "synth": SyntheticSpec,
}


def parse_config(text: str) -> dict[str, str]:
    """Raw key -> value strings from config text; rejects malformed or
    duplicate lines."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {line.strip()!r}")
        key, value = body.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def build_settings(overrides: dict[str, str] | None = None) -> Settings:
    """Default settings with typed overrides applied. Range checks run
    in each dataclass constructor."""
    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    for key, raw in (overrides or {}).items():
        conv = _REGISTRY.get(key)
        if conv is None:
            raise ConfigError(f"unknown config key {key!r}")
        section, field_name = key.split(".", 1)
        try:
            values[section][field_name] = conv(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    built = {name: cls(**values[name]) for name, cls in _SECTIONS.items()}
    return Settings(**built)


def settings_from_file(path: str) -> Settings:
    with open(path) as fh:
        return build_settings(parse_config(fh.read()))


def config_help() -> str:
    """One line per known key with its type and default."""
    defaults = build_settings().as_flat_dict()
    lines = []
    for key in sorted(_REGISTRY):
        conv = _REGISTRY[key]
        tag = getattr(conv, "__name__", str(conv)).removeprefix("_parse_")
        lines.append(f"{key}  ({tag})  default: {defaults[key]}")
    return "\n".join(lines)


def default_config_text() -> str:
    """A commented template carrying the desk-scale defaults, with the
    reference full-scale values noted where they differ."""
    return """\
# model
model.image_size = 48
model.patch_size = 8            # full-scale reference: 224 / 16
model.knn_k = 9
model.feature_dim = 64
model.encoder_depth = 3
model.decoder_depth = 2
model.residual = true
model.remask = true
model.zero_mask = false         # true: mask with zeros instead of a token
model.recompute_knn = false     # true: rebuild edges from layer features

# training
train.epochs = 100              # full-scale reference: 1600
train.batch_size = 32           # full-scale reference: 1024
train.base_lr = 8e-3            # scaled by batch/256 (linear scaling rule)
train.weight_decay = 0.01
train.warmup_fraction = 0.1     # fraction of steps; reference uses 50 epochs
train.queue_capacity = 256      # full-scale reference: 4096
train.seed = 0
train.optimizer = adamw
train.deterministic = true

# augmentations
aug.mask_ratio = 0.5
aug.drop_ratio = 0.2
aug.grayscale_prob = 0.2
aug.max_shift = 0.1

# loss
loss.gamma = 2.0
loss.tau = 0.01
loss.alpha = 1.0
loss.eta = 0.5
loss.mu = 0.5
loss.momentum = 0.999

# age estimator
elm.overlap = 2.0
elm.depth = 2
elm.cv_folds = 5
elm.lam_grid = 1e-5,1e-4,1e-3,1e-2,1e-1,1,10,100,1000
elm.hidden_grid = 180,200,220,240,260,280,300,320,340,360,380,400
                                # full-scale reference grid: 1800..4000 step 200

# synthetic corpus
synth.count = 2000
synth.size = 48
synth.seed = 0
synth.noise = 0.1
synth.age_min = 1
synth.age_max = 90
"""
