"""Experiment configuration files: JSON documents with a strict schema.

Unknown keys are rejected so a typo in a scheme field cannot silently fall
back to a default. Errors name the offending field and, where it can be
located, the line it sits on.
"""

from __future__ import annotations

import dataclasses
import json
import os
import re
from dataclasses import dataclass

from .errors import ConfigError
from .slicing import NORMALIZATIONS, SCHEME_KINDS, SliceScheme
from .trainer import DTYPES, ModelConfig, OptimizerConfig, TrainConfig

SEED_ENV = "SLICEOUT_SEED"


@dataclass
class DatasetConfig:
    kind: str = "blobs"
    classes: int = 10
    dim: int = 64
    n: int = 500
    spread: float = 1.0
    seed: int = 0
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass
class ExperimentConfig:
    model: ModelConfig
    scheme: SliceScheme
    optimizer: OptimizerConfig
    dataset: DatasetConfig
    epochs: int
    batch: int = 64
    seed: int = 0
    cutoff_fraction: float | None = None
    precision: str = "f64"
    output: str = "run"

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.model, self.scheme, self.optimizer, self.epochs, self.batch, self.seed,
                           self.cutoff_fraction, self.precision)


_SECTIONS = {
    "model": ModelConfig,
    "scheme": SliceScheme,
    "optimizer": OptimizerConfig,
    "dataset": DatasetConfig,
}
_REQUIRED = ("model", "scheme", "epochs", "dataset")
_CHOICES = {
    "model.kind": ("mlp", "resblock", "attention"),
    "model.placement": ("first-conv", "input-patch"),
    "scheme.kind": SCHEME_KINDS,
    "scheme.normalization": NORMALIZATIONS,
    "optimizer.kind": ("sgd", "adam"),
    "dataset.kind": ("blobs", "idx"),
    "precision": tuple(DTYPES),
}


def _line_of(text, path):
    """Line of the dotted key ``path`` in the raw JSON, searching each
    component after the previous one."""
    if text is None:
        return None
    pos = 0
    for key in path.split("."):
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if m is None:
            return None
        pos = m.start()
    return text.count("\n", 0, pos) + 1


def _fail(msg, text=None, key=None):
    line = _line_of(text, key) if key else None
    where = f" (line {line})" if line else ""
    raise ConfigError(f"{msg}{where}")


def _check_type(path, value, default, text):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        _fail(f"field {path!r}: expected {type(default).__name__}, got {type(value).__name__}", text, path)
    if path in _CHOICES and value not in _CHOICES[path]:
        _fail(f"field {path!r}: {value!r} is not one of {list(_CHOICES[path])}", text, path)


def _build(cls, data, prefix, text):
    if not isinstance(data, dict):
        _fail(f"field {prefix!r}: expected an object", text, prefix)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            _fail(f"unknown field {prefix + '.' + key!r}", text, f"{prefix}.{key}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default if f.default is not dataclasses.MISSING else (
            f.default_factory() if f.default_factory is not dataclasses.MISSING else None)
        if value is not None or default is not None:
            _check_type(f"{prefix}.{name}", value, default, text)
        kwargs[name] = tuple(value) if isinstance(default, tuple) else value
    try:
        return cls(**kwargs)
    except (ValueError, ConfigError) as e:
        _fail(f"section {prefix!r}: {e}", text, prefix)


def from_dict(data, text=None) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    for key in data:
        if key not in top:
            _fail(f"unknown field {key!r}", text, key)
    for key in _REQUIRED:
        if key not in data:
            raise ConfigError(f"missing required field {key!r}")
    kwargs = {}
    for name, value in data.items():
        if name in _SECTIONS:
            kwargs[name] = _build(_SECTIONS[name], value, name, text)
            continue
        default = top[name].default
        if name == "epochs":
            default = 1
        if not (name == "cutoff_fraction" and value is None):
            _check_type(name, value, default if default is not None else 0.0, text)
        kwargs[name] = value
    kwargs.setdefault("optimizer", OptimizerConfig())
    cfg = ExperimentConfig(**kwargs)
    if cfg.dataset.kind == "idx" and (cfg.dataset.images is None or cfg.dataset.labels is None):
        _fail("dataset of kind 'idx' needs 'images' and 'labels'", text, "dataset")
    try:
        cfg.train_config()
    except ConfigError as e:
        raise ConfigError(f"invalid config: {e}") from None
    return cfg


def to_dict(cfg: ExperimentConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["optimizer"]["betas"] = list(cfg.optimizer.betas)
    return out


def dumps(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2) + "\n"


def loads(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None
    return from_dict(data, text)


def load(path, env=None) -> ExperimentConfig:
    """Read a config file; ``SLICEOUT_SEED`` in ``env`` overrides its seed."""
    with open(path, encoding="utf-8") as f:
        cfg = loads(f.read())
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    return cfg
