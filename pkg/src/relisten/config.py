"""Run configuration: every tunable of the pipeline in one flat record.

Config files are plain ``key=value`` text, one setting per line, ``#`` starts a
comment. ``lambda`` is accepted as an alias for :attr:`RunConfig.lam`.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


TIME_UNITS = {"seconds": 1.0, "minutes": 60.0, "hours": 3600.0, "days": 86400.0}


@dataclass(frozen=True)
class RunConfig:
    # sessions / sequences
    k: int = 10
    gap_minutes: float = 20.0
    L: int = 20
    step: int = 5
    min_session_len: int = 2
    min_sessions_per_user: int = 0
    n_test: int = 10
    n_val: int = 5
    malformed_tolerance: float = 0.01
    # ACT-R
    alpha: float = 0.5
    time_unit: str = "hours"
    n_top: int = 20
    # model
    d: int = 128
    B: int = 2
    H: int = 2
    residual: bool = False
    embeddings_path: str | None = None
    trainable_embeddings: bool | None = None
    # training
    lam: float = 0.5
    lr: float = 0.001
    epochs: int = 100
    batch_size: int = 512
    neg_mode: str = "popularity"
    neg_beta: float = 0.5
    patience: int = 5
    full_window: bool = False
    clamp_session_loss: bool = False
    seed: int = 0
    # evaluation
    n_runs: int = 1
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.d % self.H:
            raise ConfigError(f"H={self.H} must divide d={self.d}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.time_unit not in TIME_UNITS:
            raise ConfigError(f"unknown time_unit {self.time_unit!r}")
        if self.neg_mode not in ("uniform", "popularity"):
            raise ConfigError(f"neg_mode must be uniform|popularity, got {self.neg_mode!r}")
        if self.k < 1 or self.L < 1 or self.step < 1 or self.gap_minutes <= 0:
            raise ConfigError("k, L, step and gap_minutes must be positive")

    @property
    def gap_seconds(self) -> int:
        return int(round(self.gap_minutes * 60))

    @property
    def time_scale(self) -> float:
        """Seconds per BL time unit."""
        return TIME_UNITS[self.time_unit]

    @property
    def embeddings_trainable(self) -> bool:
        if self.trainable_embeddings is None:
            return self.embeddings_path is None
        return self.trainable_embeddings

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "extra"}

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            lines.append(f"{'lambda' if key == 'lam' else key}={_format_value(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "RunConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs: dict[str, Any] = {}
        for key, raw in values.items():
            name = "lam" if key == "lambda" else key
            if name not in kinds or name == "extra":
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = _coerce(name, kinds[name], raw)
        return cls(**kwargs)


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(name: str, kind: str, raw: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    optional = "None" in kind
    if optional and text.lower() in ("none", ""):
        return None
    try:
        if kind.startswith("bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return text


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path: str | Path | None = None, **overrides: Any) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(values)
