"""Flat `key = value` run configuration.

One assignment per line; `#` starts a comment; blank lines are ignored.
Dotted keys group settings (model.*, optimizer.*, augment.*).  Unknown
keys and malformed values are errors that name the offending line.
Every run must state its seed explicitly; nothing falls back to the
wall clock.

`config_digest` hashes the exact config text (FNV-1a, 64-bit) so a
checkpoint can record which configuration produced it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

from .model import MODES, SliceSpec, WiserModelSpec
from .optim import SgdConfig


class ConfigError(ValueError):
    """Bad configuration text; the message names the line."""


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = False
    resize_min_side: int = 256
    crop: int = 224
    flip_prob: float = 0.5
    area_range: tuple = (0.08, 1.0)
    aspect_range: tuple = (0.75, 4.0 / 3.0)
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    pca_sigma: float = 0.1


@dataclass
class RunConfig:
    seed: int
    dataset_root: str = ""
    output_dir: str = "runs/out"
    log_interval: int = 50
    checkpoint_interval: int = 500
    model: WiserModelSpec = field(default_factory=WiserModelSpec)
    optimizer: SgdConfig = field(default_factory=SgdConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)


# The stock schedule: 0.01 until 50000, 0.002 until 90000, 0.0004 until
# the stop at 100000 iterations, shrunk by scale_factor for desk runs.
DEFAULT_CONFIG_TEXT = """\
# Stock desk-scale run: synthetic 10-class benchmark, full two-branch model.

seed = 7
dataset_root = data/synth10
output_dir = runs/default
log_interval = 50
checkpoint_interval = 500

model.input_height = 64
model.input_width = 64
model.num_classes = 10
model.widen_factor = 4
model.blocks_per_stage = 2
model.fc_hidden = 512
model.mode = full
model.slice.kernel_height = 5
model.slice.feature_maps = 32
model.slice.pool_window_height = 0
model.slice.pool_stride_height = 0

optimizer.base_lr = 0.01
optimizer.milestones = 50000:0.002,90000:0.0004
optimizer.momentum = 0.9
optimizer.weight_decay = 0.0005
optimizer.batch_size = 24
optimizer.max_iterations = 100000
optimizer.scale_factor = 0.02

# Synthetic images are already model-sized; no train-time augmentation.
augment.enabled = false
"""


def _parse_bool(raw: str) -> bool:
    if raw.lower() in ("true", "yes", "1", "on"):
        return True
    if raw.lower() in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_milestones(raw: str) -> tuple:
    out = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        it_s, _, lr_s = part.partition(":")
        if not lr_s:
            raise ValueError(f"milestone {part!r} is not iteration:rate")
        out.append((int(it_s), float(lr_s)))
    return tuple(out)


def _parse_pair(raw: str) -> tuple:
    parts = [p for p in raw.split(",") if p.strip()]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated numbers, got {raw!r}")
    return (float(parts[0]), float(parts[1]))


def _parse_mode(raw: str) -> str:
    if raw not in MODES:
        raise ValueError(f"mode must be one of {', '.join(MODES)}")
    return raw


# key -> (target path, value parser); targets are applied onto a dict tree
_SCHEMA = {
    "seed": ("seed", int),
    "dataset_root": ("dataset_root", str),
    "output_dir": ("output_dir", str),
    "log_interval": ("log_interval", int),
    "checkpoint_interval": ("checkpoint_interval", int),
    "model.input_height": ("model.input_height", int),
    "model.input_width": ("model.input_width", int),
    "model.num_classes": ("model.num_classes", int),
    "model.widen_factor": ("model.widen_factor", int),
    "model.blocks_per_stage": ("model.blocks_per_stage", int),
    "model.fc_hidden": ("model.fc_hidden", int),
    "model.mode": ("model.mode", _parse_mode),
    "model.slice.kernel_height": ("model.slice.kernel_height", int),
    "model.slice.feature_maps": ("model.slice.feature_maps", int),
    "model.slice.pool_window_height": ("model.slice.pool_window_height", int),
    "model.slice.pool_stride_height": ("model.slice.pool_stride_height", int),
    "optimizer.base_lr": ("optimizer.base_lr", float),
    "optimizer.milestones": ("optimizer.milestones", _parse_milestones),
    "optimizer.momentum": ("optimizer.momentum", float),
    "optimizer.weight_decay": ("optimizer.weight_decay", float),
    "optimizer.batch_size": ("optimizer.batch_size", int),
    "optimizer.max_iterations": ("optimizer.max_iterations", int),
    "optimizer.scale_factor": ("optimizer.scale_factor", float),
    "augment.enabled": ("augment.enabled", _parse_bool),
    "augment.resize_min_side": ("augment.resize_min_side", int),
    "augment.crop": ("augment.crop", int),
    "augment.flip_prob": ("augment.flip_prob", float),
    "augment.area_range": ("augment.area_range", _parse_pair),
    "augment.aspect_range": ("augment.aspect_range", _parse_pair),
    "augment.brightness": ("augment.brightness", float),
    "augment.contrast": ("augment.contrast", float),
    "augment.saturation": ("augment.saturation", float),
    "augment.pca_sigma": ("augment.pca_sigma", float),
}


def parse_config(text: str) -> RunConfig:
    values: Dict[str, object] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, raw = line.partition("=")
        if not eq:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {raw_line.strip()!r}")
        key, raw = key.strip(), raw.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        target, parser = _SCHEMA[key]
        try:
            values[target] = parser(raw)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {e}") from e

    if "seed" not in values:
        raise ConfigError("config must set `seed` (runs never seed from the clock)")

    def take(prefix: str) -> Dict[str, object]:
        plen = len(prefix)
        return {k[plen:]: v for k, v in values.items() if k.startswith(prefix)}

    model_kv = take("model.")
    slice_kv = {k[len("slice."):]: v for k, v in model_kv.items() if k.startswith("slice.")}
    model_kv = {k: v for k, v in model_kv.items() if not k.startswith("slice.")}
    ih = model_kv.pop("input_height", 64)
    iw = model_kv.pop("input_width", 64)
    model = WiserModelSpec(input_size=(int(ih), int(iw)),
                           slice_spec=SliceSpec(**slice_kv), **model_kv)
    optimizer = SgdConfig(**take("optimizer."))
    augment = AugmentConfig(**take("augment."))

    cfg = RunConfig(
        seed=int(values["seed"]),
        dataset_root=str(values.get("dataset_root", "")),
        output_dir=str(values.get("output_dir", "runs/out")),
        log_interval=int(values.get("log_interval", 50)),
        checkpoint_interval=int(values.get("checkpoint_interval", 500)),
        model=model, optimizer=optimizer, augment=augment)
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg: RunConfig) -> None:
    try:
        cfg.model.validate()
        cfg.optimizer.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if cfg.log_interval < 1:
        raise ConfigError("log_interval must be >= 1")
    if cfg.checkpoint_interval < 0:
        raise ConfigError("checkpoint_interval must be >= 0 (0 = final only)")
    a = cfg.augment
    if a.enabled:
        h, w = cfg.model.input_size
        if (a.crop, a.crop) != (h, w):
            raise ConfigError(
                f"augment.crop {a.crop} must match the model input {h}x{w}")
        if a.resize_min_side < a.crop:
            raise ConfigError("augment.resize_min_side must be >= augment.crop")
        if not (0.0 <= a.flip_prob <= 1.0):
            raise ConfigError("augment.flip_prob must lie in [0, 1]")
        if not (0 < a.area_range[0] <= a.area_range[1] <= 1.0):
            raise ConfigError("augment.area_range must be 0 < lo <= hi <= 1")
        if not (0 < a.aspect_range[0] <= a.aspect_range[1]):
            raise ConfigError("augment.aspect_range must be positive and ordered")
        if a.pca_sigma < 0:
            raise ConfigError("augment.pca_sigma must be >= 0")


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def config_digest(text: str) -> int:
    """FNV-1a 64-bit over the exact config bytes."""
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def default_run_config() -> RunConfig:
    return parse_config(DEFAULT_CONFIG_TEXT)
