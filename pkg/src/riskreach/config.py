"""Run configuration: defaults, ``key=value`` files, and flag overrides.

Precedence (lowest to highest): built-in defaults, ``--config`` file,
command-line flags.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .navsim import ConfigError, ScenarioConfig, load_scenario
from .trainer import TrainConfig

_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    scenario: str = ""  # path to a scenario file; empty means built-in defaults
    seeds: tuple = (0,)
    epsilon: float = 0.01
    safety_threshold: float = -1.0  # negative means the scenario's d_col
    sweep_substeps: int = 10

    def scenario_config(self) -> ScenarioConfig:
        return load_scenario(self.scenario) if self.scenario else ScenarioConfig()

    def to_dict(self) -> dict:
        d = {f.name: getattr(self.train, f.name) for f in fields(TrainConfig)}
        d.update(scenario=self.scenario, seeds=",".join(str(s) for s in self.seeds),
                 epsilon=self.epsilon, safety_threshold=self.safety_threshold,
                 sweep_substeps=self.sweep_substeps)
        return d


_RUN_KEYS = {"scenario": str, "seeds": "seeds", "epsilon": float, "safety_threshold": float,
             "sweep_substeps": int}


def _coerce(key, value):
    if key in _TRAIN_FIELDS:
        kind = type(getattr(TrainConfig(), key))
    elif key in _RUN_KEYS:
        kind = _RUN_KEYS[key]
    else:
        raise ConfigError(f"unknown key {key!r}")
    if kind == "seeds":
        if isinstance(value, (list, tuple)):
            return tuple(int(s) for s in value)
        parts = [p for p in str(value).replace(";", ",").split(",") if p.strip()]
        if not parts:
            raise ConfigError("seeds: need at least one seed")
        return tuple(int(p) for p in parts)
    if isinstance(value, kind):
        return value
    try:
        if kind is int:
            return int(str(value))
        return kind(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    d = cfg.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        d[key] = _coerce(key, value)
    return from_dict(d)


def from_dict(d: dict) -> RunConfig:
    train_kw = {}
    run_kw = {}
    for key, value in d.items():
        value = _coerce(key, value)
        if key in _TRAIN_FIELDS:
            train_kw[key] = value
        else:
            run_kw[key] = value
    try:
        train = TrainConfig(**train_kw).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig(train=train, **run_kw)
    if cfg.epsilon < 0:
        raise ConfigError("epsilon must be nonnegative")
    if cfg.sweep_substeps < 1:
        raise ConfigError("sweep_substeps must be at least 1")
    return cfg


def parse_run_config(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TRAIN_FIELDS and key not in _RUN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[key] = value
    return apply_overrides(base, updates)


def load_run_config(path) -> RunConfig:
    return parse_run_config(Path(path).read_text(encoding="utf-8"))


def run_config_text(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        lines.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    return "\n".join(lines) + "\n"
