import json
import os
import sys
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sweepd.engine import (Backoff, BusyError, EngineConfig, EngineError, FaultPlan,
                           FaultTrigger, LocalEngine, SimEngine, next_creation_delay)


class TestBackoff:
    @pytest.mark.parametrize("attempt,want", [(0, 1), (3, 8), (10, 60)])
    def test_delay(self, attempt, want):
        assert next_creation_delay(attempt) == want

    def test_reset_after_success(self):
        b = Backoff(1, 60)
        assert b.ready(0)
        b.failure(0)
        b.failure(0)
        assert b.next_at == 4 and not b.ready(3.9)
        b.success(10)
        assert b.attempt == 0 and b.next_at == 11

    @given(st.integers(0, 50))
    def test_capped_and_monotone(self, k):
        assert next_creation_delay(k) <= 60
        assert next_creation_delay(k) <= next_creation_delay(k + 1)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            EngineConfig(prefix="")
        with pytest.raises(ValueError):
            EngineConfig(max_clients=0)


class TestFaultPlan:
    def test_after_nth_message_fires_once(self):
        plan = FaultPlan([{"target": "c-1", "after": 2, "kind": "GRANT_TASKS"}])
        obs = [plan.observe("c-1", "client", "recv", k, None)
               for k in ["GRANT_TASKS", "LOG", "GRANT_TASKS", "GRANT_TASKS"]]
        assert obs == [False, False, True, False]
        assert len(plan.fired) == 1

    def test_role_target_and_origin(self):
        plan = FaultPlan([FaultTrigger("primary", after=2, direction="forwarded",
                                       origin="c0")])
        assert not plan.observe("s-0", "primary", "forwarded", "RESULT", "c0")
        assert not plan.observe("s-0", "primary", "forwarded", "RESULT", "c1")
        assert not plan.observe("s-0", "primary", "recv", "RESULT", "c0")
        assert plan.observe("s-0", "primary", "forwarded", "LOG", "c0")

    def test_at_offset(self):
        plan = FaultPlan([{"target": "backup", "at": 1.0}])
        assert not plan.due("s-1", "backup", 0.5)
        assert not plan.due("s-1", "primary", 2.0)
        assert plan.due("s-1", "backup", 1.0)
        assert not plan.due("s-1", "backup", 3.0)

    @pytest.mark.parametrize("bad", [
        {"target": "x"}, {"target": "x", "at": 1, "after": 1},
        {"target": "x", "at": 1, "action": "pause"},
        {"target": "x", "after": 1, "direction": "sideways"}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            FaultTrigger(**bad)


class _Idle:
    """Stands in for a node in SimEngine bookkeeping tests."""

    def __init__(self):
        self.killed = False
        self.hub = type("H", (), {"address": ("127.0.0.1", 0)})()

    def kill(self):
        self.killed = True

    def close(self):
        pass

    def run(self):
        while not self.killed:
            time.sleep(0.01)


class TestSimEngine:
    def engine(self, **kw):
        eng = SimEngine(EngineConfig(prefix="sim", max_clients=2), **kw)
        # never boot real nodes in these tests
        eng._boot = lambda name, kind, args: None
        return eng

    def test_lifecycle_matches_replay_oracle(self):
        eng = self.engine()
        assert eng.list_instances() == []
        a = eng.create_instance("client", [])
        b = eng.create_instance("client", [])
        assert [a.name, b.name] == ["sim-client-0", "sim-client-1"]
        with pytest.raises(BusyError):
            eng.create_instance("client", [])
        assert eng.terminate_instance(a)
        assert eng.terminate_instance(a)  # idempotent
        s = eng.create_instance("server", [])
        live = set()
        for op, name in eng.log:
            (live.add if op == "create" else live.discard)(name)
        assert {h.name for h in eng.list_instances()} == live == {b.name, s.name}
        assert eng.log.count(("terminate", a.name)) == 1

    def test_unknown_and_bad_kind(self):
        eng = self.engine()
        assert eng.terminate_instance("sim-client-9") is False
        with pytest.raises(EngineError):
            eng.create_instance("gpu", [])

    def test_rate_limit(self):
        eng = self.engine(min_create_interval=10)
        eng.create_instance("server", [])
        with pytest.raises(BusyError):
            eng.create_instance("server", [])

    def test_killed_instance_leaves_listing(self):
        eng = self.engine()
        h = eng.create_instance("client", [])
        node = _Idle()
        eng.nodes[h.name] = node
        eng.kill(h.name)
        assert node.killed and eng.list_instances() == []
        assert eng.terminate_instance(h)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from(["create", "terminate"]),
                              st.integers(0, 5)), max_size=20))
    def test_random_sequences(self, ops):
        eng = SimEngine(EngineConfig(prefix="p", max_clients=100))
        eng._boot = lambda name, kind, args: None
        live, names = set(), []
        for op, i in ops:
            if op == "create":
                names.append(eng.create_instance("client", []).name)
                live.add(names[-1])
            elif names:
                name = names[i % len(names)]
                eng.terminate_instance(name)
                live.discard(name)
        assert {h.name for h in eng.list_instances()} == live


class TestLocalEngine:
    def test_spawn_list_terminate(self, tmp_path, monkeypatch):
        # a stand-in interpreter that just sleeps, so no real client starts
        fake = tmp_path / "fakepy"
        fake.write_text(f"#!{sys.executable}\nimport time\ntime.sleep(30)\n")
        fake.chmod(0o755)
        eng = LocalEngine(EngineConfig(prefix="loc", max_clients=1), tmp_path / "reg",
                          python=str(fake))
        h = eng.create_instance("client", ["--primary", "127.0.0.1:1"])
        assert h.name == "loc-client-0"
        assert [x.name for x in eng.list_instances()] == ["loc-client-0"]
        with pytest.raises(BusyError):
            eng.create_instance("client", [])
        entry = json.loads((tmp_path / "reg" / "loc-client-0.json").read_text())
        pid = entry["pid"]
        assert eng.terminate_instance(h)
        assert eng.list_instances() == []
        assert eng.terminate_instance(h)
        assert not os.path.exists(f"/proc/{pid}") or \
            open(f"/proc/{pid}/stat").read().split(")")[-1].split()[0] == "Z"
        # a second engine over the same registry sees the same state
        other = LocalEngine(EngineConfig(prefix="loc"), tmp_path / "reg")
        assert other.list_instances() == []
        assert other.terminate_instance("loc-client-7") is False

    def test_backup_gets_registry(self, tmp_path):
        fake = tmp_path / "fakepy"
        fake.write_text(f"#!{sys.executable}\nimport sys, time\n"
                        "print(' '.join(sys.argv[1:]), flush=True)\n")
        fake.chmod(0o755)
        eng = LocalEngine(EngineConfig(prefix="loc"), tmp_path / "reg", python=str(fake))
        eng.create_instance("server", ["--snapshot", "s"])
        deadline = time.time() + 5
        out = tmp_path / "reg" / "loc-server-0.out"
        while time.time() < deadline and not out.read_text():
            time.sleep(0.05)
        argv = out.read_text().split()
        assert argv[:3] == ["-m", "sweepd", "backup"]
        assert argv[argv.index("--engine-registry") + 1] == str(tmp_path / "reg")
        assert argv[argv.index("--name") + 1] == "loc-server-0"
        eng.close()
