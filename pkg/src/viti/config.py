"""Run configuration: a flat key set resolved as flags > config file > defaults.

The config file is a flat JSON object whose keys are a subset of
``RunConfig`` fields. Unknown keys are rejected so typos do not pass
silently.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

from viti._io import atomic_write_text
from viti.errors import ConfigError
from viti.perturb import NoiseSchedule
from viti.vri import InterventionConfig

CONFIG_FORMAT_VERSION = 1
OUT_DIR_ENV = "VITI_OUT_DIR"


@dataclass(frozen=True)
class RunConfig:
    # paths
    model: Optional[str] = None
    probes: Optional[str] = None
    dataset: Optional[str] = None
    out_dir: str = "."
    # model overrides (used when training a new model)
    n_layers: int = 4
    n_heads: int = 8
    head_dim: int = 8
    ffn_mult: int = 4
    max_seq: int = 40
    # intervention
    alpha0: float = 0.20
    beta: float = 0.10
    gate_threshold: float = 0.5
    epsilon: float = 1e-8
    # noise schedule
    total_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 5e-3
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("seed", "a seed is required")
        if int(self.workers) < 1:
            raise ConfigError("workers", "must be >= 1")
        # construct the owned configs once so their own checks run here
        self.intervention()
        self.schedule()

    def intervention(self) -> InterventionConfig:
        return InterventionConfig(self.alpha0, self.beta, self.gate_threshold, self.epsilon)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.total_steps, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return asdict(self)

    def require(self, *keys) -> "RunConfig":
        """Check that path keys are set and point at existing files."""
        for key in keys:
            value = getattr(self, key)
            if value is None:
                raise ConfigError(key, f"--{key} is required")
            if not Path(value).exists():
                raise ConfigError(key, f"file not found: {value}")
        return self


KEYS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, value):
    kind = type(RunConfig.__dataclass_fields__[key].default)
    if value is None:
        return None
    if key in ("model", "probes", "dataset", "out_dir"):
        return str(value)
    try:
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind is float:
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"invalid value {value!r}") from None
    return value


def defaults() -> dict:
    d = {k: f.default for k, f in KEYS.items()}
    env_out = os.environ.get(OUT_DIR_ENV)
    if env_out:
        d["out_dir"] = env_out
    return d


def parse_config_text(text: str) -> dict:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config", "config file must be a flat JSON object")
    data = dict(data)
    version = data.pop("format_version", CONFIG_FORMAT_VERSION)
    if version != CONFIG_FORMAT_VERSION:
        raise ConfigError("format_version", f"unsupported config version {version}")
    for key, value in data.items():
        if key not in KEYS:
            raise ConfigError(key, "unknown config key")
        if isinstance(value, (dict, list)):
            raise ConfigError(key, "config values must be scalars")
    return {k: _coerce(k, v) for k, v in data.items()}


def resolve(flags: Optional[dict] = None, config_path=None) -> RunConfig:
    """Merge defaults, then the config file, then explicitly given flags (None = not given)."""
    merged = defaults()
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError("config", f"file not found: {config_path}")
        merged.update(parse_config_text(path.read_text()))
    for key, value in (flags or {}).items():
        if key in KEYS and value is not None:
            merged[key] = _coerce(key, value)
    return RunConfig(**merged)


def dump_config(cfg: RunConfig) -> str:
    data = {"format_version": CONFIG_FORMAT_VERSION, **cfg.to_dict()}
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def load_config(path) -> RunConfig:
    return RunConfig(**{**defaults(), **parse_config_text(Path(path).read_text())})


def save_config(cfg: RunConfig, path) -> None:
    atomic_write_text(path, dump_config(cfg))


def with_(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **kw)
