"""Experiment configuration, read from a JSON file."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .engine import EngineConfig, FaultPlan, FaultTrigger
from .server import HealthPolicy


class ConfigError(ValueError):
    pass


_ENGINE_KEYS = {f.name for f in fields(EngineConfig)}
_WORKLOAD_KEYS = {"name", "max_m", "per_setting", "timeout", "seed"}
_HEALTH_KEYS = {"period", "limit", "max_non_active"}
_BACKOFF_KEYS = {"base", "cap"}
_SIM_KEYS = {"boot_delay", "min_create_interval"}


@dataclass
class ExperimentConfig:
    engine: str = "sim"
    engine_config: EngineConfig = field(default_factory=EngineConfig)
    min_group_size: int = 0
    backup_enabled: bool | None = None
    health: HealthPolicy = field(default_factory=HealthPolicy)
    backoff_base: float = 1.0
    backoff_cap: float = 60.0
    workload: dict = field(default_factory=lambda: {"name": "assignment", "max_m": 4,
                                                    "per_setting": 2, "timeout": 60.0,
                                                    "seed": 0})
    fault_plan: list = field(default_factory=list)
    sim: dict = field(default_factory=dict)
    output_dir: str = "output"
    trace: str | None = None
    client_cpus: int | None = None
    host: str = "127.0.0.1"
    port: int = 0
    deadline: float | None = None  # wall-clock limit for the whole run

    def __post_init__(self):
        if self.engine not in ("local", "sim"):
            raise ConfigError(f"engine must be 'local' or 'sim', not {self.engine!r}")
        if self.backup_enabled is None:
            # A local backup would share the machine with the primary, so
            # it protects against little; keep it opt-in there.
            self.backup_enabled = self.engine == "sim"
        if self.fault_plan and self.engine != "sim":
            raise ConfigError("fault_plan is only supported by the sim engine")
        if self.min_group_size < 0:
            raise ConfigError("min_group_size must be >= 0")
        if self.client_cpus is not None and self.client_cpus < 1:
            raise ConfigError("client_cpus must be >= 1")
        try:
            FaultPlan(self.fault_plan)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad fault_plan: {exc}") from exc

    def fault_triggers(self) -> FaultPlan:
        return FaultPlan([FaultTrigger(**t) if isinstance(t, dict) else t
                          for t in self.fault_plan])

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        data = dict(data)
        top = {f.name for f in fields(cls)} - {"engine_config", "backoff_base",
                                                "backoff_cap"}
        allowed = top | _ENGINE_KEYS | {"backoff"}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        engine_cfg = {k: data.pop(k) for k in list(data) if k in _ENGINE_KEYS}
        kw: dict = {}
        try:
            kw["engine_config"] = EngineConfig(**engine_cfg)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad engine settings: {exc}") from exc
        health = _section(data.pop("health", {}), _HEALTH_KEYS, "health")
        try:
            kw["health"] = HealthPolicy(**health)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        backoff = _section(data.pop("backoff", {}), _BACKOFF_KEYS, "backoff")
        if "base" in backoff:
            kw["backoff_base"] = float(backoff["base"])
        if "cap" in backoff:
            kw["backoff_cap"] = float(backoff["cap"])
        if "workload" in data:
            wl = _section(data.pop("workload"), _WORKLOAD_KEYS, "workload")
            kw["workload"] = {"name": "assignment", **wl}
        if "sim" in data:
            kw["sim"] = _section(data.pop("sim"), _SIM_KEYS, "sim")
        kw.update(data)
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


def _section(value, keys: set, name: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{name} must be an object")
    unknown = sorted(set(value) - keys)
    if unknown:
        raise ConfigError(f"unknown {name} keys: {unknown}")
    return dict(value)
