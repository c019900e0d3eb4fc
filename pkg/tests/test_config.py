import json

import pytest

from sweepd.config import ConfigError, ExperimentConfig


def test_defaults_per_engine():
    assert ExperimentConfig.from_dict({"engine": "sim"}).backup_enabled is True
    assert ExperimentConfig.from_dict({"engine": "local"}).backup_enabled is False
    assert ExperimentConfig.from_dict({"engine": "local",
                                       "backup_enabled": True}).backup_enabled


def test_sections_parsed():
    cfg = ExperimentConfig.from_dict({
        "prefix": "exp", "max_clients": 3, "min_group_size": 18,
        "health": {"period": 1, "limit": 5}, "backoff": {"base": 0.5, "cap": 4},
        "workload": {"max_m": 5, "per_setting": 20},
        "fault_plan": [{"target": "primary", "at": 3.0}]})
    assert cfg.engine_config.prefix == "exp" and cfg.engine_config.max_clients == 3
    assert (cfg.health.period, cfg.health.limit, cfg.health.max_non_active) == (1, 5, 90)
    assert (cfg.backoff_base, cfg.backoff_cap) == (0.5, 4.0)
    assert cfg.workload == {"name": "assignment", "max_m": 5, "per_setting": 20}
    assert len(cfg.fault_triggers().triggers) == 1


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"health": {"period": 5, "limit": 5}},
    {"health": {"bogus": 1}},
    {"workload": {"max_m": 4, "colour": "red"}},
    {"backoff": 3},
    {"engine": "cloud"},
    {"engine": "local", "fault_plan": [{"target": "primary", "at": 1}]},
    {"fault_plan": [{"target": "primary"}]},
    {"min_group_size": -1},
    {"client_cpus": 0},
    {"max_clients": 0},
    [1, 2],
])
def test_rejected(data):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(data)


def test_load(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"engine": "local", "output_dir": "out"}))
    assert ExperimentConfig.load(p).output_dir == "out"
    p.write_text("{broken")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.json")
