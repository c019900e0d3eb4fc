"""Compute engines: create, terminate and list instances.

:class:`LocalEngine` runs every instance as an OS process on this machine.
:class:`SimEngine` runs instances as in-process nodes talking over loopback
sockets and can kill them on a :class:`FaultPlan` schedule.
"""
from __future__ import annotations

import json
import logging
import os
import signal
import subprocess
import sys
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

BACKOFF_BASE = 1.0
BACKOFF_CAP = 60.0


class EngineError(RuntimeError):
    pass


class BusyError(EngineError):
    """Retriable: rate limited or at capacity."""


@dataclass
class EngineConfig:
    prefix: str = "sweep"
    project: str = ""
    zone: str = ""
    server_image: str = ""
    client_image: str = ""
    root_folder: str = "."
    project_folder: str = ""
    max_clients: int = 4

    def __post_init__(self):
        if not self.prefix:
            raise ValueError("prefix must be non-empty")
        if self.max_clients < 1:
            raise ValueError("max_clients must be >= 1")


@dataclass
class InstanceHandle:
    name: str
    kind: str  # "client" | "server"
    address: str | None = None
    port: int | None = None
    created_at: float = field(default_factory=time.time)


def next_creation_delay(attempt: int, base: float = BACKOFF_BASE,
                        cap: float = BACKOFF_CAP) -> float:
    return min(base * 2 ** max(attempt, 0), cap)


class Backoff:
    """Spacing of creation attempts: ``base * 2**failures``, capped."""

    def __init__(self, base: float = BACKOFF_BASE, cap: float = BACKOFF_CAP):
        self.base, self.cap = base, cap
        self.attempt = 0
        self.next_at = 0.0

    def ready(self, now: float) -> bool:
        return now >= self.next_at

    def success(self, now: float) -> None:
        self.attempt = 0
        self.next_at = now + next_creation_delay(0, self.base, self.cap)

    def failure(self, now: float) -> None:
        self.attempt += 1
        self.next_at = now + next_creation_delay(self.attempt, self.base, self.cap)


@dataclass
class FaultTrigger:
    """Kill ``target`` (instance name or role) at a wall-clock offset or
    after its ``after``-th message matching ``kind``/``direction``/``origin``.

    ``direction`` is ``recv`` (handled by the target), ``sent`` or
    ``forwarded`` (client messages the primary relays to the backup;
    ``origin`` then names the client).
    """
    target: str
    action: str = "kill"
    at: float | None = None
    after: int | None = None
    kind: str | None = None
    direction: str = "recv"
    origin: str | None = None
    fired: bool = False

    def __post_init__(self):
        if self.action != "kill":
            raise ValueError(f"unsupported fault action {self.action!r}")
        if (self.at is None) == (self.after is None):
            raise ValueError("a fault trigger needs exactly one of 'at' or 'after'")
        if self.direction not in ("recv", "sent", "forwarded"):
            raise ValueError(f"bad direction {self.direction!r}")

    def applies_to(self, name: str, role: str) -> bool:
        return self.target in (name, role)


class FaultPlan:
    def __init__(self, triggers=()):
        self.triggers = [t if isinstance(t, FaultTrigger) else FaultTrigger(**t)
                         for t in triggers]
        self._counts: dict = {}
        self._lock = threading.Lock()
        self.fired: list[tuple] = []

    def __bool__(self):
        return bool(self.triggers)

    def observe(self, name: str, role: str, direction: str, kind: str,
                origin: str | None) -> bool:
        """Count one message event; True if the node must die now."""
        with self._lock:
            for i, t in enumerate(self.triggers):
                if t.fired or t.after is None or not t.applies_to(name, role):
                    continue
                if t.direction != direction or (t.kind and t.kind != kind):
                    continue
                if t.origin and t.origin != origin:
                    continue
                n = self._counts[(i, name)] = self._counts.get((i, name), 0) + 1
                if n >= t.after:
                    t.fired = True
                    self.fired.append((name, role, direction, kind, n, time.time()))
                    return True
        return False

    def due(self, name: str, role: str, elapsed: float) -> bool:
        with self._lock:
            for t in self.triggers:
                if (not t.fired and t.at is not None and t.applies_to(name, role)
                        and elapsed >= t.at):
                    t.fired = True
                    self.fired.append((name, role, "at", None, elapsed, time.time()))
                    return True
        return False


class Engine(ABC):
    def __init__(self, config: EngineConfig):
        self.config = config

    @abstractmethod
    def create_instance(self, kind: str, launch_args: list[str]) -> InstanceHandle: ...

    @abstractmethod
    def terminate_instance(self, handle) -> bool: ...

    @abstractmethod
    def list_instances(self) -> list[InstanceHandle]: ...

    def close(self) -> None:
        for h in self.list_instances():
            self.terminate_instance(h)

    def _check_kind(self, kind):
        if kind not in ("client", "server"):
            raise EngineError(f"unknown instance kind {kind!r}")

    @staticmethod
    def _name_of(handle) -> str:
        return handle if isinstance(handle, str) else handle.name


class LocalEngine(Engine):
    """Instances are ``python -m sweepd client|backup`` processes.

    The registry lives on disk so that a promoted backup server, running
    in another process, can list and terminate what the primary created.
    """

    def __init__(self, config: EngineConfig, registry_dir: str | os.PathLike,
                 python: str = sys.executable):
        super().__init__(config)
        self.registry = Path(registry_dir)
        self.registry.mkdir(parents=True, exist_ok=True)
        self.python = python
        self._procs: dict[str, subprocess.Popen] = {}

    def _entries(self) -> list[dict]:
        out = []
        for p in sorted(self.registry.glob("*.json")):
            try:
                out.append(json.loads(p.read_text()))
            except (OSError, json.JSONDecodeError):
                continue
        return [e for e in out if e["name"].startswith(self.config.prefix + "-")]

    def _alive(self, pid: int) -> bool:
        proc = next((p for p in self._procs.values() if p.pid == pid), None)
        if proc is not None:
            return proc.poll() is None
        try:
            with open(f"/proc/{pid}/stat") as f:
                return f.read().split(")")[-1].split()[0] != "Z"
        except OSError:
            return False

    def _live_clients(self) -> int:
        return sum(1 for h in self.list_instances() if h.kind == "client")

    def create_instance(self, kind, launch_args):
        self._check_kind(kind)
        if kind == "client" and self._live_clients() >= self.config.max_clients:
            raise BusyError("at max_clients")
        ordinal = sum(1 for e in self._entries() if e["kind"] == kind)
        name = f"{self.config.prefix}-{kind}-{ordinal}"
        cmd = "client" if kind == "client" else "backup"
        argv = [self.python, "-m", "sweepd", cmd, *launch_args, "--name", name]
        if kind == "server":
            argv += ["--engine-registry", str(self.registry)]
        out = open(self.registry / f"{name}.out", "wb")
        err = open(self.registry / f"{name}.err", "wb")
        try:
            proc = subprocess.Popen(argv, stdout=out, stderr=err,
                                    start_new_session=True)
        except OSError as exc:
            raise EngineError(f"spawn failed: {exc}") from exc
        finally:
            out.close()
            err.close()
        self._procs[name] = proc
        handle = InstanceHandle(name, kind)
        entry = {**asdict(handle), "pid": proc.pid, "terminated": False}
        (self.registry / f"{name}.json").write_text(json.dumps(entry))
        log.info("created %s (pid %d)", name, proc.pid)
        return handle

    def terminate_instance(self, handle):
        name = self._name_of(handle)
        path = self.registry / f"{name}.json"
        if not path.exists():
            log.warning("terminate: unknown instance %s", name)
            return False
        entry = json.loads(path.read_text())
        if not entry.get("terminated"):
            pid = entry["pid"]
            if self._alive(pid):
                try:
                    os.killpg(pid, signal.SIGKILL)
                except OSError:
                    pass
            entry["terminated"] = True
            path.write_text(json.dumps(entry))
        proc = self._procs.pop(name, None)
        if proc is not None:
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                pass
        return True

    def list_instances(self):
        return [InstanceHandle(e["name"], e["kind"], e.get("address"), e.get("port"),
                               e["created_at"])
                for e in self._entries()
                if not e.get("terminated") and self._alive(e["pid"])]


class SimEngine(Engine):
    """In-process instances on loopback sockets with fault injection.

    A killed instance stops silently: it sends nothing more, swallows
    input, and keeps its sockets open, so peers only notice through
    missing health updates.
    """

    def __init__(self, config: EngineConfig, fault_plan: FaultPlan | None = None,
                 trace=None, boot_delay: dict | None = None,
                 min_create_interval: float = 0.0, node_options: dict | None = None):
        super().__init__(config)
        from .trace import NullTrace
        self.faults = fault_plan or FaultPlan()
        self.trace = trace if trace is not None else NullTrace()
        self.boot_delay = {"client": 0.0, "server": 0.0, **(boot_delay or {})}
        self.min_create_interval = min_create_interval
        self.node_options = node_options or {}
        self.nodes: dict = {}
        self.handles: dict[str, InstanceHandle] = {}
        self.dead: set[str] = set()
        self.terminated: set[str] = set()
        self.log: list[tuple] = []
        self._ordinals = {"client": 0, "server": 0}
        self._last_create = -1e9
        self._threads: list[threading.Thread] = []
        self._lock = threading.RLock()

    def _new_name(self, kind):
        with self._lock:
            n = self._ordinals[kind]
            self._ordinals[kind] += 1
        return f"{self.config.prefix}-{kind}-{n}"

    def register_primary(self, server) -> InstanceHandle:
        """Adopt an already constructed primary server as an instance."""
        name = self._new_name("server")
        server.name = name
        server.on_death = lambda: self.node_died(name)
        handle = InstanceHandle(name, "server", *server.hub.address)
        with self._lock:
            self.handles[name] = handle
            self.nodes[name] = server
            self.log.append(("create", name))
        self._start_thread(name, server.run)
        return handle

    def create_instance(self, kind, launch_args):
        self._check_kind(kind)
        with self._lock:
            now = time.monotonic()
            if now - self._last_create < self.min_create_interval:
                raise BusyError("rate limited")
            if kind == "client":
                live = sum(1 for h in self.list_instances() if h.kind == "client")
                if live >= self.config.max_clients:
                    raise BusyError("at max_clients")
            self._last_create = now
            name = self._new_name(kind)
            handle = InstanceHandle(name, kind)
            self.handles[name] = handle
            self.log.append(("create", name))
        self.trace.record(name, "instance_created", kind=kind)
        self._start_thread(name, lambda: self._boot(name, kind, list(launch_args)))
        return handle

    def _boot(self, name, kind, args):
        delay = self.boot_delay.get(kind, 0.0)
        if delay:
            time.sleep(delay)
        with self._lock:
            if name in self.dead:
                return
        if kind == "client":
            from .client import Client, parse_client_args
            opts = parse_client_args(args + ["--name", name])
            node = Client.from_args(opts, trace=self.trace, faults=self.faults,
                                    **self.node_options.get("client", {}))
        else:
            from .server import Server, parse_backup_args
            opts = parse_backup_args(args + ["--name", name])
            node = Server.from_snapshot_args(opts, engine=self, trace=self.trace,
                                             faults=self.faults)
        with self._lock:
            if name in self.dead:
                node.kill()
                node.close()
                return
            self.nodes[name] = node
            node.on_death = lambda: self.node_died(name)
            self.handles[name].address, self.handles[name].port = node.hub.address
        node.run()

    def _start_thread(self, name, target):
        def body():
            try:
                target()
            except Exception:
                log.exception("instance %s crashed", name)
                self.trace.record(name, "crashed")
        t = threading.Thread(target=body, name=f"sim-{name}", daemon=True)
        self._threads.append(t)
        t.start()

    def kill(self, name: str) -> None:
        """Fault-inject a silent stop."""
        with self._lock:
            self.dead.add(name)
            node = self.nodes.get(name)
        if node is not None:
            node.kill()

    def node_died(self, name: str) -> None:
        with self._lock:
            self.dead.add(name)

    def terminate_instance(self, handle):
        name = self._name_of(handle)
        with self._lock:
            if name not in self.handles:
                log.warning("terminate: unknown instance %s", name)
                return False
            if name not in self.terminated:
                self.terminated.add(name)
                self.log.append(("terminate", name))
            self.dead.add(name)
            node = self.nodes.get(name)
        if node is not None:
            node.kill()
        return True

    def list_instances(self):
        with self._lock:
            return [h for n, h in self.handles.items()
                    if n not in self.dead and n.startswith(self.config.prefix + "-")]

    def live_nodes(self) -> list:
        with self._lock:
            return [n for name, n in self.nodes.items() if name not in self.dead]

    def close(self):
        with self._lock:
            names = list(self.handles)
            nodes = list(self.nodes.values())
            self.dead.update(names)
        for node in nodes:
            node.kill()
        for node in nodes:
            node.close()
        for t in self._threads:
            t.join(timeout=5)
