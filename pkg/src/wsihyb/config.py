"""Pipeline configuration and the flat ``key = value`` config format."""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

ENV_PREFIX = "WSIHYB_"


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    threshold: float = 0.4            # T: patch removal threshold
    reweight: float = 4.0             # V: positive pseudo-label scale
    ratio: tuple = (2, 1, 7)          # R: fine : pseudo positive : hard negative
    top_k: int = 16                   # K
    stage1_epochs: int = 30
    stage2_epochs: int = 15
    max_rounds: int = 2
    stage2_pos_neg_ratio: tuple = (1, 1)
    seed: int = 0
    stage1_lr: float = 0.5
    stage2_lr: float = 0.5
    stage1_batch: int = 10
    stage2_batch: int = 16
    patch_size: int = 512
    overlap: int = 128
    downsample: int = 32
    workers: int = 1

    def __post_init__(self):
        self.ratio = tuple(int(r) for r in self.ratio)
        self.stage2_pos_neg_ratio = tuple(int(r) for r in self.stage2_pos_neg_ratio)
        self.validate()

    def validate(self):
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.reweight < 1:
            raise ConfigError(f"reweight must be >= 1, got {self.reweight}")
        if len(self.ratio) != 3 or min(self.ratio) < 0 or sum(self.ratio) == 0:
            raise ConfigError(f"ratio must be three non-negative integers, not all zero: {self.ratio}")
        if len(self.stage2_pos_neg_ratio) != 2 or min(self.stage2_pos_neg_ratio) < 1:
            raise ConfigError(f"stage2_pos_neg_ratio must be two positive integers: {self.stage2_pos_neg_ratio}")
        for name in ("top_k", "stage1_epochs", "stage2_epochs", "stage1_batch", "stage2_batch",
                     "patch_size", "downsample", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.max_rounds < 0:
            raise ConfigError("max_rounds must be >= 0")
        if self.stage1_lr < 0 or self.stage2_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        if not 0 <= self.overlap < self.patch_size:
            raise ConfigError("overlap must be in [0, patch_size)")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self, exclude=()):
        lines = []
        for f in fields(self):
            if f.name in exclude:
                continue
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ":".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def digest(self, exclude=("workers",)):
        """sha256 of the config text without fields that cannot change results."""
        return hashlib.sha256(self.to_text(exclude).encode()).hexdigest()


def _coerce(default, raw, key):
    try:
        if isinstance(default, tuple):
            return tuple(int(p) for p in raw.replace(",", ":").split(":"))
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_key_values(text, known, source="config"):
    """Parse ``key = value`` lines; '#' starts a comment; unknown keys are errors."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def coerce_values(cls, raw):
    defaults = {f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory())
                for f in fields(cls)}
    return {k: _coerce(defaults[k], v, k) for k, v in raw.items()}


def load_pipeline_config(path=None, env=None, overrides=None):
    """Defaults, then config file, then WSIHYB_* environment, then explicit overrides."""
    known = {f.name for f in fields(PipelineConfig)}
    values = {}
    if path is not None:
        values.update(coerce_values(PipelineConfig, parse_key_values(Path(path).read_text(), known, str(path))))
    env = os.environ if env is None else env
    env_raw = {k[len(ENV_PREFIX):].lower(): v for k, v in env.items() if k.startswith(ENV_PREFIX)}
    env_raw = {k: v for k, v in env_raw.items() if k in known}
    values.update(coerce_values(PipelineConfig, env_raw))
    for key, value in (overrides or {}).items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r}")
        if value is not None:
            values[key] = value
    return PipelineConfig(**values)
