"""Run configuration: one flat dotted-key JSON file merged with ``key=value``
overrides on top of the library defaults.

Precedence is override > file > default. Every key must name an existing
field of the corpus, model or train section; anything else is rejected.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .datagen import CorpusConfig
from .model import ConfigError, ModelConfig
from .trainer import TrainConfig

SECTIONS = {"corpus": CorpusConfig, "model": ModelConfig, "train": TrainConfig}


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def flat(self) -> dict:
        """Flat ``section.field`` view, JSON-serialisable (tuples as lists)."""
        out = {}
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                v = getattr(obj, f.name)
                out[f"{section}.{f.name}"] = list(v) if isinstance(v, tuple) else v
        return out

    def to_json(self) -> str:
        return json.dumps(self.flat(), indent=2, sort_keys=True) + "\n"

    def validate(self) -> "RunConfig":
        self.corpus.validate()
        self.model.validate()
        self.train.validate()
        return self


def _coerce(key: str, default, value):
    """Convert ``value`` to the type of ``default``, or raise ConfigError."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, tuple):
        if isinstance(value, (list, tuple)) and default:
            return tuple(_coerce(key, default[0], v) for v in value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    raise ConfigError(f"config key {key!r}: cannot use {value!r} as {type(default).__name__}")


def parse_override(text: str) -> tuple[str, object]:
    """``train.learning_rate=1e-3`` -> ``("train.learning_rate", 0.001)``.

    Values are read as JSON when possible, else kept as bare strings.
    """
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply(cfg: RunConfig, values: dict) -> RunConfig:
    for key, value in values.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(cfg, section)
        if name not in {f.name for f in fields(obj)}:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(obj, name, _coerce(key, getattr(obj, name), value))
    return cfg


def load_run_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``key=value`` overrides.

    ``seed`` (the ``--seed`` flag) sets both the corpus master seed and the
    training seed, and wins over everything else.
    """
    cfg = RunConfig()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON ({exc.msg})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path}: expected a JSON object of dotted keys")
        apply(cfg, data)
    apply(cfg, dict(parse_override(o) for o in overrides))
    if seed is not None:
        cfg.corpus.master_seed = seed
        cfg.train.seed = seed
    return cfg.validate()
