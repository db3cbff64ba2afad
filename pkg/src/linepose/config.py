"""Run configuration: TOML file with schema validation, CLI overrides on top.

Example::

    [model]
    width = 32
    depth = 3
    heads = 4
    variant = "full"        # baseline, +L, +LP, +V, +V+W, full

    [train]
    steps = 2000
    lr = 1e-3

    [synth]
    n_points = 128
    pixel_noise = 0.5
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .datagen.scene import SceneParams
from .dualgraph import get_variant
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainSettings:
    n_points: int = 384
    n_lines: int = 192
    lr: float = 1e-4
    batch_size: int = 16
    steps: int = 1000
    seed: int = 0
    eval_every: int = 100
    eval_pairs: int = 64
    checkpoint_every: int = 0
    stop_rot_deg: float | None = None
    stop_tran_deg: float | None = None
    # "step": fresh random subset every step; "pair": one fixed subset per pair
    resample: str = "step"
    # steps trained with the variance held at 1 before the learned variance takes over
    logvar_warmup: int = 0
    # learning rate once the learned variance is on (None: keep ``lr``)
    lr_after_warmup: float | None = None


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    synth: SceneParams = field(default_factory=SceneParams)

    def validate(self):
        try:
            self.model.validate()
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None
        t = self.train
        if t.n_points <= 0:
            raise ConfigError("train.n_points must be > 0")
        if get_variant(self.model.variant).lines and t.n_lines <= 0:
            raise ConfigError(f"variant {self.model.variant!r} uses lines: train.n_lines must be > 0")
        if t.n_lines < 0:
            raise ConfigError("train.n_lines must be >= 0")
        if t.lr < 0 or t.batch_size <= 0 or t.steps < 0 or t.eval_every <= 0 or t.logvar_warmup < 0:
            raise ConfigError("train: lr >= 0, batch_size > 0, steps >= 0, eval_every > 0, logvar_warmup >= 0 required")
        if t.resample not in ("step", "pair"):
            raise ConfigError(f"train.resample must be 'step' or 'pair', got {t.resample!r}")
        try:
            self.synth.validate()
        except ValueError as exc:
            raise ConfigError(f"synth: {exc}") from None
        return self

    def to_dict(self):
        return {
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "synth": self.synth.to_dict(),
        }


_SECTIONS = {"model": ModelConfig, "train": TrainSettings, "synth": SceneParams}


def _coerce(section, key, value, ftype):
    ftype = str(ftype)
    if "tuple" in ftype:
        if not isinstance(value, (list, tuple)) or len(value) != 2:
            raise ConfigError(f"{section}.{key}: expected a 2-element list")
        return tuple(float(v) if "image" not in key else int(v) for v in value)
    if ftype.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key}: expected true/false, got {value!r}")
        return value
    if ftype.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key}: expected an integer, got {value!r}")
        return value
    if ftype.startswith("float"):
        if value is None and "None" in ftype:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key}: expected a number, got {value!r}")
        return float(value)
    if ftype.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{key}: expected a string, got {value!r}")
        return value
    return value


def from_dict(data: dict, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    parts = {"model": base.model, "train": base.train, "synth": base.synth}
    for section, values in data.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        known = {f.name: f.type for f in fields(_SECTIONS[section])}
        updates = {}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown key {section}.{key}")
            updates[key] = _coerce(section, key, value, known[key])
        parts[section] = dataclasses.replace(parts[section], **updates)
    return TrainConfig(**parts).validate()


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Read a TOML file (optional) and apply dotted-key overrides."""
    data = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    cfg = from_dict(data)
    if overrides:
        nested = {}
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, _, key = dotted.partition(".")
            nested.setdefault(section, {})[key] = value
        cfg = from_dict(nested, cfg)
    return cfg
