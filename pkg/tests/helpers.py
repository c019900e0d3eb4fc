"""Independent oracles and fakes shared by the tests."""
from __future__ import annotations

import itertools
import queue
from pathlib import Path

from sweepd.config import ExperimentConfig
from sweepd.engine import BusyError, Engine, EngineConfig, InstanceHandle
from sweepd.protocol import Envelope, Kind
from sweepd.task import Status


# oracles ---------------------------------------------------------------

def geq(a, b) -> bool:
    return all(x >= y for x, y in zip(a, b))


def brute_minimal(seq) -> set:
    s = set(map(tuple, seq))
    return {a for a in s if not any(b != a and geq(a, b) for b in s)}


def brute_assignment(costs) -> int:
    """Cheapest assignment of tasks (columns) to distinct agents (rows)."""
    n, m = len(costs), len(costs[0])
    return min(sum(costs[p[j]][j] for j in range(m))
               for p in itertools.permutations(range(n), m))


def done_ids(state) -> set:
    return {tid for tid, st in state.task_status.items() if st.state is Status.DONE}


# fakes -----------------------------------------------------------------

class FakeHub:
    """Records sends instead of using sockets."""

    def __init__(self, name="fake", reachable=True):
        self.name = name
        self.address = ("127.0.0.1", 1)
        self.inbox = queue.Queue()
        self.out = {}
        self.sent = []
        self.once = []
        self.connects = []
        self.dropped = []
        self.killed = False
        self.reachable = reachable

    def send(self, key, env):
        if key not in self.out or self.killed:
            return False
        self.sent.append((key, env))
        return True

    def connect(self, key, host, port, hello=None, connect_timeout=None):
        self.out[key] = (host, port)
        self.connects.append((key, host, port, hello))

    def drop(self, key):
        self.out.pop(key, None)
        self.dropped.append(key)

    def rekey(self, old, new):
        a, b = self.out.pop(old, None), self.out.pop(new, None)
        if a is not None:
            self.out[new] = a
        if b is not None:
            self.out[old] = b

    def send_once(self, host, port, env, timeout=2.0):
        self.once.append((host, port, env))
        return self.reachable

    def get(self, timeout=None):
        try:
            return self.inbox.get(timeout=timeout)
        except queue.Empty:
            return None

    def drain(self):
        items = []
        while not self.inbox.empty():
            items.append(self.inbox.get_nowait())
        return items

    def kill(self):
        self.killed = True

    def close(self):
        self.killed = True

    def to(self, key, kind=None):
        return [e for k, e in self.sent if k == key and (kind is None or e.kind is kind)]


class FakeLink:
    def __init__(self, role, peer_id):
        self.role, self.peer_id = role, peer_id


class FakeEngine(Engine):
    def __init__(self, prefix="t", max_clients=4, busy=False):
        super().__init__(EngineConfig(prefix=prefix, max_clients=max_clients))
        self.live = {}
        self.created = []
        self.terminated = []
        self.busy = busy
        self._n = {"client": 0, "server": 0}

    def create_instance(self, kind, launch_args):
        if self.busy:
            raise BusyError("busy")
        name = f"{self.config.prefix}-{kind}-{self._n[kind]}"
        self._n[kind] += 1
        h = InstanceHandle(name, kind)
        self.live[name] = h
        self.created.append((kind, name, list(launch_args)))
        return h

    def terminate_instance(self, handle):
        name = self._name_of(handle)
        self.terminated.append(name)
        return self.live.pop(name, None) is not None

    def list_instances(self):
        return list(self.live.values())


def env(kind, sender="c0", seq=0, **body):
    return Envelope(Kind(kind), sender, seq, body)


# sim runs --------------------------------------------------------------

FAST_HEALTH = {"period": 0.1, "limit": 1.5, "max_non_active": 8.0}


def sim_config(output_dir: Path, **overrides) -> ExperimentConfig:
    data = {"engine": "sim", "prefix": "sw", "max_clients": 2, "client_cpus": 2,
            "output_dir": str(output_dir), "health": dict(FAST_HEALTH),
            "backoff": {"base": 0.05, "cap": 1.0},
            "workload": {"max_m": 4, "per_setting": 3, "timeout": 30, "seed": 0},
            "deadline": 100}
    data.update(overrides)
    return ExperimentConfig.from_dict(data)


# acceptance report -----------------------------------------------------

ACCEPTANCE_LINES: list = []
