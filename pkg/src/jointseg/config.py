"""Training configuration: a flat key=value schema with typed parsing.

Parsing reports every violation at once (unknown keys, wrong types,
out-of-range values), not just the first, so a config file can be fixed
in one pass.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass
from pathlib import Path

PIPELINE_KINDS = ("jdl", "direct", "two_step", "mtl")

# the reference experiment trains 224x224 images in batches of 40 for
# 500 epochs; the desk-scale defaults below fit a laptop CPU
FULL_SCALE_IMAGE_SIZE = 224
FULL_SCALE_BATCH_SIZE = 40
FULL_SCALE_EPOCHS = 500


@dataclass(frozen=True)
class TrainConfig:
    pipeline: str = "jdl"
    depth: int = 3
    base_channels: int = 8
    dropout_p: float = 0.39
    learning_rate: float = 4.73e-4
    myo_loss_weight: float = 1.02
    weight_decay_myo: float = 5.58e-6
    weight_decay_scar: float = 5.58e-6
    dice_weight: float = 1.0
    dice_smooth: float = 1e-6
    threshold: float = 0.5
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    train_dataset: str = ""
    out_dir: str = ""


def full_scale_preset(**overrides) -> TrainConfig:
    """Reference-scale run sizes; everything else keeps its default."""
    merged = {"batch_size": FULL_SCALE_BATCH_SIZE, "epochs": FULL_SCALE_EPOCHS}
    merged.update(overrides)
    return validate(TrainConfig(**merged))


def _range_errors(cfg: TrainConfig) -> list[str]:
    errs = []
    if cfg.pipeline not in PIPELINE_KINDS:
        errs.append(f"pipeline must be one of {'/'.join(PIPELINE_KINDS)}, "
                    f"got {cfg.pipeline!r}")
    if cfg.depth < 1:
        errs.append(f"depth must be >= 1, got {cfg.depth}")
    if cfg.base_channels < 1:
        errs.append(f"base_channels must be >= 1, got {cfg.base_channels}")
    if not 0.0 <= cfg.dropout_p < 1.0:
        errs.append(f"dropout_p must be in [0, 1), got {cfg.dropout_p}")
    if cfg.learning_rate <= 0:
        errs.append(f"learning_rate must be > 0, got {cfg.learning_rate}")
    for name in ("myo_loss_weight", "weight_decay_myo", "weight_decay_scar",
                 "dice_weight"):
        if getattr(cfg, name) < 0:
            errs.append(f"{name} must be >= 0, got {getattr(cfg, name)}")
    if cfg.dice_smooth <= 0:
        errs.append(f"dice_smooth must be > 0, got {cfg.dice_smooth}")
    if not 0.0 < cfg.threshold < 1.0:
        errs.append(f"threshold must be in (0, 1), got {cfg.threshold}")
    if cfg.batch_size < 1:
        errs.append(f"batch_size must be >= 1, got {cfg.batch_size}")
    if cfg.epochs < 1:
        errs.append(f"epochs must be >= 1, got {cfg.epochs}")
    return errs


def validate(cfg: TrainConfig) -> TrainConfig:
    errs = _range_errors(cfg)
    if errs:
        raise ValueError("invalid config:\n  " + "\n  ".join(errs))
    return cfg


def parse_config(text: str) -> TrainConfig:
    """Parse key=value lines ('#' starts a comment) into a validated config."""
    field_types = typing.get_type_hints(TrainConfig)
    values: dict = {}
    errs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            errs.append(f"line {lineno}: expected key=value, got {raw.strip()!r}")
            continue
        if key not in field_types:
            errs.append(f"line {lineno}: unknown key {key!r}")
            continue
        if key in values:
            errs.append(f"line {lineno}: duplicate key {key!r}")
            continue
        try:
            values[key] = field_types[key](val)
        except ValueError:
            errs.append(f"line {lineno}: {key} expects "
                        f"{field_types[key].__name__}, got {val!r}")
    if errs:
        raise ValueError("invalid config:\n  " + "\n  ".join(errs))
    cfg = TrainConfig(**values)
    return validate(cfg)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def config_text(cfg: TrainConfig) -> str:
    """Canonical serialization: declaration order, one key=value per line.

    Floats use repr so the text parses back to the identical value.
    """
    lines = []
    for f in dataclasses.fields(TrainConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}={v!r}" if isinstance(v, float) else f"{f.name}={v}")
    return "\n".join(lines) + "\n"
