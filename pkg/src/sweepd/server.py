"""The task server: a replicable state machine run as primary or backup.

The primary hands tasks to pulling clients, prunes tasks that are at least
as hard as one that timed out, creates and reaps instances, and forwards
every client message to the backup. The backup applies the forwarded
copies, holds the copies it gets directly from clients, and takes over
(replaying the held copies) when the primary stops sending health updates.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import protocol as P
from .engine import Backoff, BusyError, Engine, EngineError
from .net import Hub
from .node import InstanceKilled, Node
from .protocol import Envelope, Kind
from .results import ResultTable, finalize, write_results
from .task import (MinAntichain, Status, TaskDescriptor, TaskStatus,
                   order_tasks)

log = logging.getLogger(__name__)

PRIMARY = "primary"
BACKUP = "backup"


@dataclass
class HealthPolicy:
    period: float = 2.0
    limit: float = 20.0
    max_non_active: float = 90.0

    def __post_init__(self):
        if self.limit <= self.period:
            raise ValueError("health limit must exceed the health update period")


@dataclass
class ServerOptions:
    prefix: str = "sweep"
    output_dir: str = "output"
    min_group_size: int = 0
    backup_enabled: bool = True
    health: HealthPolicy = field(default_factory=HealthPolicy)
    backoff_base: float = 1.0
    backoff_cap: float = 60.0
    max_clients: int = 4
    client_cpus: int | None = None
    host: str = "127.0.0.1"
    port: int = 0
    result_titles: tuple = ()
    group_titles: tuple = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["result_titles"] = list(self.result_titles)
        d["group_titles"] = list(self.group_titles)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ServerOptions":
        d = dict(d)
        d["health"] = HealthPolicy(**d.get("health", {}))
        d["result_titles"] = tuple(d.get("result_titles", ()))
        d["group_titles"] = tuple(d.get("group_titles", ()))
        return cls(**d)

    @property
    def logical_id(self) -> str:
        return f"{self.prefix}-server"


@dataclass
class ClientRecord:
    client_id: str
    address: str | None = None
    port: int | None = None
    last_health: float = 0.0
    handshaken: bool = False
    created_at: float = 0.0
    assigned: set = field(default_factory=set)
    outstanding_requests: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["assigned"] = sorted(self.assigned)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClientRecord":
        return cls(**{**d, "assigned": set(d.get("assigned", ()))})


@dataclass
class BackupRecord:
    name: str
    address: str | None = None
    port: int | None = None
    handshaken: bool = False
    created_at: float = 0.0
    last_health: float = 0.0


@dataclass
class ServerState:
    role: str
    ordered_tasks: list
    task_status: dict
    tasks_from_failed: list = field(default_factory=list)
    min_hard: MinAntichain = field(default_factory=MinAntichain)
    clients: dict = field(default_factory=dict)
    backup: BackupRecord | None = None
    no_further_sent: set = field(default_factory=set)
    results: dict = field(default_factory=dict)
    min_group_size: int = 0
    frozen: bool = False
    next_task_cursor: int = 0
    out_seq: dict = field(default_factory=dict)
    results_written: bool = False

    @classmethod
    def initial(cls, tasks, min_group_size: int = 0) -> "ServerState":
        ordered = order_tasks(tasks)
        ids = [t.task_id for t in ordered]
        if len(set(ids)) != len(ids):
            raise ValueError("task ids must be unique")
        return cls(role=PRIMARY, ordered_tasks=ordered,
                   task_status={t.task_id: TaskStatus() for t in ordered},
                   min_group_size=min_group_size)

    @property
    def task_by_id(self) -> dict:
        cache = self.__dict__.get("_by_id")
        if cache is None or len(cache) != len(self.ordered_tasks):
            cache = {t.task_id: t for t in self.ordered_tasks}
            self.__dict__["_by_id"] = cache
        return cache

    def counts(self) -> dict:
        out = {s: 0 for s in Status}
        for st in self.task_status.values():
            out[st.state] += 1
        return out

    def set_status(self, task_id: int, state: Status, client_id: str | None = None):
        self.task_status[task_id] = self.task_status[task_id].to(state, client_id)

    def digest(self) -> tuple:
        """The replicated part of the state, for primary/backup comparison."""
        return (self.next_task_cursor,
                tuple(sorted((k, v.state.value, v.client_id)
                             for k, v in self.task_status.items())),
                tuple(sorted(self.min_hard.elements)),
                tuple(self.tasks_from_failed),
                tuple(sorted(self.results)),
                tuple(sorted(c for c, r in self.clients.items() if r.handshaken)))

    # snapshot: one record per field, same line encoding as the wire

    def to_records(self) -> list[dict]:
        return [
            {"field": "role", "value": self.role},
            {"field": "ordered_tasks", "value": [t.to_dict() for t in self.ordered_tasks]},
            {"field": "task_status",
             "value": {str(k): v.to_dict() for k, v in self.task_status.items()}},
            {"field": "tasks_from_failed", "value": list(self.tasks_from_failed)},
            {"field": "min_hard", "value": self.min_hard.to_list()},
            {"field": "clients", "value": {k: v.to_dict() for k, v in self.clients.items()}},
            {"field": "backup", "value": asdict(self.backup) if self.backup else None},
            {"field": "no_further_sent", "value": sorted(self.no_further_sent)},
            {"field": "results", "value": {str(k): list(v) for k, v in self.results.items()}},
            {"field": "min_group_size", "value": self.min_group_size},
            {"field": "frozen", "value": self.frozen},
            {"field": "next_task_cursor", "value": self.next_task_cursor},
            {"field": "out_seq", "value": dict(self.out_seq)},
            {"field": "results_written", "value": self.results_written},
        ]

    @classmethod
    def from_records(cls, records: list[dict]) -> "ServerState":
        v = {r["field"]: r["value"] for r in records}
        backup = v.get("backup")
        return cls(
            role=v["role"],
            ordered_tasks=[TaskDescriptor.from_dict(d) for d in v["ordered_tasks"]],
            task_status={int(k): TaskStatus.from_dict(d) for k, d in v["task_status"].items()},
            tasks_from_failed=list(v["tasks_from_failed"]),
            min_hard=MinAntichain(v["min_hard"]),
            clients={k: ClientRecord.from_dict(d) for k, d in v["clients"].items()},
            backup=BackupRecord(**backup) if backup else None,
            no_further_sent=set(v["no_further_sent"]),
            results={int(k): list(r) for k, r in v["results"].items()},
            min_group_size=v["min_group_size"],
            frozen=v["frozen"],
            next_task_cursor=v["next_task_cursor"],
            out_seq=dict(v["out_seq"]),
            results_written=v["results_written"],
        )

    def __eq__(self, other):
        if not isinstance(other, ServerState):
            return NotImplemented
        return self.to_records() == other.to_records()


class SnapshotError(ValueError):
    pass


def write_snapshot(path, state: ServerState, options: ServerOptions,
                   primary_name: str, primary_address: tuple) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = [{"field": "options", "value": options.to_dict()},
               {"field": "primary", "value": {"name": primary_name,
                                              "address": list(primary_address)}}]
    records += state.to_records()
    records.append({"field": "end", "value": len(records)})
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, separators=(",", ":")) + "\n")
    os.replace(tmp, path)
    return path


def read_snapshot(path) -> tuple[ServerState, ServerOptions, dict]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        records = [json.loads(ln) for ln in lines if ln.strip()]
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SnapshotError(f"unreadable snapshot {path}: {exc}") from exc
    if not records or records[-1].get("field") != "end" \
            or records[-1].get("value") != len(records) - 1:
        raise SnapshotError(f"truncated snapshot {path}")
    v = {r["field"]: r["value"] for r in records}
    try:
        options = ServerOptions.from_dict(v["options"])
        state = ServerState.from_records(records)
    except (KeyError, TypeError, ValueError) as exc:
        raise SnapshotError(f"corrupt snapshot {path}: {exc}") from exc
    return state, options, v["primary"]


def parse_backup_args(argv: list[str]) -> argparse.Namespace:
    p = argparse.ArgumentParser(prog="sweepd backup")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--primary", required=True, help="HOST:PORT of the primary")
    p.add_argument("--name", default="backup")
    p.add_argument("--engine-registry", default=None)
    return p.parse_args(argv)


def _split_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


class Server(Node):
    def __init__(self, state: ServerState, options: ServerOptions, engine: Engine | None,
                 hub: Hub | None = None, name: str = "server", trace=None, faults=None,
                 write_events: bool = True):
        hub = hub or Hub(name, options.host, options.port)
        super().__init__(name, hub, trace, faults)
        self.state = state
        self.options = options
        self.engine = engine
        self.write_events = write_events
        self.backoff = Backoff(options.backoff_base, options.backoff_cap)
        self.ctl_seq = P.Sequencer()
        self.output_dir = Path(options.output_dir)
        self._pending_handshakes: list = []
        self._deferred: list = []
        self._last_health_sent = -1e9
        self._snapshot_count = 0
        # backup-role bookkeeping
        self.primary_name: str | None = None
        self.primary_address: tuple | None = None
        self.last_primary_health = 0.0
        self.held: list[Envelope] = []
        self.forwarded_keys: set = set()
        self.results_table: ResultTable | None = None
        self.exit_when_done = True
        self.done = threading.Event()

    @property
    def role(self) -> str:
        return self.state.role

    # construction ------------------------------------------------------

    @classmethod
    def from_snapshot_args(cls, opts: argparse.Namespace, engine: Engine,
                           trace=None, faults=None) -> "Server":
        state, options, primary = read_snapshot(opts.snapshot)
        server = cls(state, options, engine, name=opts.name, trace=trace, faults=faults)
        server.primary_name = primary["name"]
        server.primary_address = _split_addr(opts.primary)
        server.state.role = BACKUP
        return server

    # messaging helpers -------------------------------------------------

    def _to_client(self, cid: str, kind: Kind, **body) -> None:
        """Send a replicated server->client message; both servers produce
        the same seq for it."""
        seq = self.state.out_seq.get(cid, 0)
        self.state.out_seq[cid] = seq + 1
        self._send(("client", cid), Envelope(kind, self.options.logical_id, seq, body))

    def _control(self, key, kind: Kind, **body) -> None:
        self._send(key, Envelope(kind, self.name, self.ctl_seq(), body))

    def _forward(self, env: Envelope) -> None:
        if self.state.backup is None or not self.state.backup.handshaken:
            return
        ok = self.hub.send("backup", env)
        self.trace.record(self.name, "forward", role=self.role, kind=env.kind.value,
                          seq=env.seq, sender=env.sender_id, ok=ok)
        self._observe("forwarded", env, origin=env.sender_id)

    def _active_clients(self) -> list[str]:
        return sorted(c for c, r in self.state.clients.items() if r.handshaken)

    def _client_event(self, cid: str, env: Envelope) -> None:
        if self.role != PRIMARY or not self.write_events:
            return
        folder = self.output_dir / "clients" / cid
        folder.mkdir(parents=True, exist_ok=True)
        text = env.body.get("text", "").replace("\n", " ")
        with open(folder / "events.log", "a", encoding="utf-8") as f:
            f.write(f"{env.body.get('timestamp', 0):.6f}\t{env.kind.value}\t{text}\n")

    # task bookkeeping --------------------------------------------------

    def _unassign(self, task_id: int) -> None:
        st = self.state.task_status[task_id]
        if st.client_id and st.client_id in self.state.clients:
            self.state.clients[st.client_id].assigned.discard(task_id)

    def assign_tasks(self, cid: str, count: int) -> Envelope | None:
        """Grant up to ``count`` tasks: reassignable ones first, then the next
        tasks in hardness order, skipping pruned ones."""
        s = self.state
        granted: list[TaskDescriptor] = []
        by_id = s.task_by_id
        while len(granted) < count and s.tasks_from_failed:
            tid = s.tasks_from_failed.pop(0)
            if s.task_status[tid].state is not Status.REASSIGNABLE:
                continue
            if s.min_hard.prunes(by_id[tid].hardness):
                s.set_status(tid, Status.SKIPPED)
                continue
            s.set_status(tid, Status.ASSIGNED, cid)
            granted.append(by_id[tid])
        while len(granted) < count and s.next_task_cursor < len(s.ordered_tasks):
            t = s.ordered_tasks[s.next_task_cursor]
            s.next_task_cursor += 1
            if s.task_status[t.task_id].state is not Status.PENDING:
                continue
            if s.min_hard.prunes(t.hardness):
                s.set_status(t.task_id, Status.SKIPPED)
                continue
            s.set_status(t.task_id, Status.ASSIGNED, cid)
            granted.append(t)
        rec = s.clients.get(cid)
        if rec is not None:
            rec.assigned.update(t.task_id for t in granted)
        if granted:
            self._to_client(cid, Kind.GRANT_TASKS, tasks=[t.to_dict() for t in granted])
            self.trace.record(self.name, "grant", role=self.role, client=cid,
                              task_ids=[t.task_id for t in granted],
                              hardness=[list(t.hardness) for t in granted])
        else:
            s.no_further_sent.add(cid)
            self._to_client(cid, Kind.NO_FURTHER_TASKS)
        return None

    def register_timeout(self, hardness, task_id: int) -> None:
        s = self.state
        st = s.task_status.get(task_id)
        if st is not None:
            if st.state is Status.ASSIGNED:
                self._unassign(task_id)
                s.set_status(task_id, Status.TIMED_OUT)
            elif st.state is Status.REASSIGNABLE:
                s.tasks_from_failed = [t for t in s.tasks_from_failed if t != task_id]
                s.set_status(task_id, Status.SKIPPED)
        s.min_hard.insert(hardness)
        self.trace.record(self.name, "timeout_registered", role=self.role,
                          task_id=task_id, hardness=list(hardness),
                          min_hard=s.min_hard.to_list())
        for cid in self._active_clients():
            self._to_client(cid, Kind.APPLY_DOMINO_EFFECT, hardness=list(hardness))

    def fail_client(self, cid: str) -> list[int]:
        """Forget a client; its unfinished tasks become reassignable."""
        s = self.state
        rec = s.clients.pop(cid, None)
        s.out_seq.pop(cid, None)
        self.hub.drop(("client", cid))
        moved = []
        for t in s.ordered_tasks:
            st = s.task_status[t.task_id]
            if st.state is Status.ASSIGNED and st.client_id == cid:
                s.set_status(t.task_id, Status.REASSIGNABLE)
                s.tasks_from_failed.append(t.task_id)
                moved.append(t.task_id)
        self.trace.record(self.name, "client_failed", role=self.role, client=cid,
                          reassigned=moved, known=rec is not None)
        return moved

    def _reconcile_bye(self, cid: str) -> None:
        s = self.state
        for t in s.ordered_tasks:
            st = s.task_status[t.task_id]
            if st.state is Status.ASSIGNED and st.client_id == cid:
                if s.min_hard.prunes(t.hardness):
                    s.set_status(t.task_id, Status.SKIPPED)
                else:
                    s.set_status(t.task_id, Status.REASSIGNABLE)
                    s.tasks_from_failed.append(t.task_id)
        s.clients.pop(cid, None)
        s.out_seq.pop(cid, None)

    # message handling --------------------------------------------------

    def handle_message(self, env: Envelope) -> None:
        """Apply one client message. The primary forwards it to the backup
        first; the backup mirrors the replies to the clients."""
        s = self.state
        cid = env.sender_id
        rec = s.clients.get(cid)
        if env.kind is Kind.HEALTH_UPDATE:
            if rec is not None:
                rec.last_health = time.time()
            return
        if rec is None or not rec.handshaken:
            log.warning("%s: %s from unknown client %s ignored",
                        self.name, env.kind.value, cid)
            return
        if self.role == PRIMARY:
            self._forward(env)
        self._record_recv(env, cid)
        kind = env.kind
        if kind is Kind.REQUEST_TASKS:
            self.assign_tasks(cid, env.body["count"])
        elif kind is Kind.RESULT:
            self._on_result(cid, env)
        elif kind is Kind.REPORT_HARD_TASK:
            self.register_timeout(env.body["hardness"], env.body["task_id"])
        elif kind in (Kind.LOG, Kind.EXCEPTION):
            self._client_event(cid, env)
            event, tid = env.body.get("event"), env.body.get("task_id")
            if event in ("domino_terminated", "worker_crashed") and tid in s.task_status:
                if s.task_status[tid].state is Status.ASSIGNED:
                    self._unassign(tid)
                    s.set_status(tid, Status.SKIPPED)
        elif kind is Kind.BYE:
            self._reconcile_bye(cid)
            self.hub.drop(("client", cid))
            if self.role == PRIMARY:
                if self.engine is not None:
                    self.engine.terminate_instance(cid)
                self._control("backup", Kind.CLIENT_TERMINATED, client_id=cid)
            self.trace.record(self.name, "bye", role=self.role, client=cid)
        self._observe("recv", env, origin=cid)

    def _on_result(self, cid: str, env: Envelope) -> None:
        s = self.state
        tid = env.body["task_id"]
        st = s.task_status.get(tid)
        if st is None:
            log.warning("%s: result for unknown task %s", self.name, tid)
            return
        if st.state is not Status.ASSIGNED:
            self.trace.record(self.name, "duplicate_result", role=self.role,
                              task_id=tid, client=cid, status=st.state.value)
            return
        self._unassign(tid)
        s.set_status(tid, Status.DONE)
        s.results[tid] = list(env.body["result_values"])
        if not self.options.result_titles:
            self.options.result_titles = tuple(env.body["result_titles"])

    # primary loop ------------------------------------------------------

    def run(self):
        try:
            if self.role == BACKUP:
                self.assume_backup_role()
            while not self._stop.is_set():
                self._check_due()
                items = self._collect(self.tick)
                if self.role == PRIMARY:
                    self.run_iteration(time.time(), items)
                    if self.state.results_written and self.exit_when_done:
                        self.shutdown()
                        break
                else:
                    self.backup_iteration(time.time(), items)
        except InstanceKilled:
            pass
        finally:
            self.trace.record(self.name, "stopped", role=self.role, killed=self.killed)

    def shutdown(self) -> None:
        """Terminate the remaining instances once results are written."""
        if self.engine is not None:
            names = list(self.state.clients)
            if self.state.backup is not None:
                names.append(self.state.backup.name)
            for name in names:
                self.engine.terminate_instance(name)
        self.trace.record(self.name, "shutdown", role=self.role)
        self.done.set()

    def _sort_inbound(self, items) -> tuple[list, list]:
        """Split inbound items into handshakes and client messages; health
        updates are applied immediately."""
        handshakes, messages = [], []
        now = time.time()
        for link, env in items:
            if link.role == BACKUP:
                b = self.state.backup
                if env.kind is Kind.HANDSHAKE:
                    handshakes.append((link, env))
                elif env.kind is Kind.HEALTH_UPDATE and b and env.sender_id == b.name:
                    b.last_health = now
            elif link.role == "client":
                if env.kind is Kind.HANDSHAKE:
                    handshakes.append((link, env))
                elif env.kind is Kind.HEALTH_UPDATE:
                    rec = self.state.clients.get(env.sender_id)
                    if rec is not None:
                        rec.last_health = now
                    self.trace.record(self.name, "health", role=self.role,
                                      sender=env.sender_id)
                else:
                    messages.append(env)
        return handshakes, messages

    def run_iteration(self, now: float | None = None, items=None) -> None:
        now = time.time() if now is None else now
        if items is None:
            items = self.hub.drain()
        handshakes, messages = self._sort_inbound(items)
        self._pending_handshakes.extend(handshakes)
        # 1. health update to the backup
        b = self.state.backup
        if b and b.handshaken and now - self._last_health_sent >= self.options.health.period:
            self._last_health_sent = now
            self.hub.send("backup", Envelope(Kind.HEALTH_UPDATE, self.name,
                                             self.ctl_seq(), {}))
        # 2. handshakes (the backup's is accepted even while frozen)
        self._accept_handshakes(now)
        # 3. client messages; while frozen only health is processed
        self._deferred.extend(messages)
        if not self.state.frozen:
            deferred, self._deferred = self._deferred, []
            for env in deferred:
                self.handle_message(env)
        # 4. backup creation takes precedence over client creation
        self._create_instances(now)
        # 5. unhealthy instances
        self._reap_unhealthy(now)
        # 6. results, once
        if not self.state.results_written and self.all_done():
            self.finalize_and_write()

    def _accept_handshakes(self, now: float) -> None:
        keep = []
        for link, env in self._pending_handshakes:
            role = env.body["kind"]
            if role == BACKUP:
                self._accept_backup(env, now)
            elif role == "client":
                if self.state.frozen:
                    keep.append((link, env))
                else:
                    self._accept_client(env, now)
        self._pending_handshakes = keep

    def _accept_client(self, env: Envelope, now: float) -> None:
        cid = env.sender_id
        rec = self.state.clients.get(cid)
        if rec is None:
            if self.engine is not None and cid not in {
                    h.name for h in self.engine.list_instances()}:
                log.warning("%s: handshake from unknown instance %s", self.name, cid)
            rec = ClientRecord(cid, created_at=now)
            self.state.clients[cid] = rec
        rec.address = env.body["listen_address"]
        rec.port = env.body["listen_port"]
        rec.handshaken = True
        rec.last_health = now
        self.hub.connect(("client", cid), rec.address, rec.port,
                         hello=P.handshake(self.name, self.ctl_seq(), PRIMARY,
                                           *self.hub.address))
        if self.write_events:
            (self.output_dir / "clients" / cid).mkdir(parents=True, exist_ok=True)
        self.trace.record(self.name, "client_handshake", role=self.role, client=cid)
        if self.state.backup and self.state.backup.handshaken:
            self._control("backup", Kind.NEW_CLIENT, client_id=cid,
                          address=rec.address, port=rec.port)

    def _accept_backup(self, env: Envelope, now: float) -> None:
        b = self.state.backup
        if b is None or b.name != env.sender_id or b.handshaken:
            log.warning("%s: unexpected backup handshake from %s", self.name, env.sender_id)
            return
        b.address = env.body["listen_address"]
        b.port = env.body["listen_port"]
        b.handshaken = True
        b.last_health = now
        self.hub.connect("backup", b.address, b.port,
                         hello=P.handshake(self.name, self.ctl_seq(), PRIMARY,
                                           *self.hub.address))
        self.trace.record(self.name, "backup_handshake", role=self.role, backup=b.name)
        self._unfreeze()

    def _freeze(self) -> None:
        self.state.frozen = True
        self.trace.record(self.name, "freeze", role=self.role)
        for cid in self._active_clients():
            self._control(("client", cid), Kind.STOP)

    def _unfreeze(self) -> None:
        if not self.state.frozen:
            return
        self.state.frozen = False
        for cid in self._active_clients():
            self._control(("client", cid), Kind.RESUME)
        self.trace.record(self.name, "unfreeze", role=self.role)

    def work_remaining(self) -> bool:
        s = self.state
        if any(s.task_status[t].state is Status.REASSIGNABLE
               and not s.min_hard.prunes(s.task_by_id[t].hardness)
               for t in s.tasks_from_failed):
            return True
        for t in s.ordered_tasks[s.next_task_cursor:]:
            if s.task_status[t.task_id].state is Status.PENDING \
                    and not s.min_hard.prunes(t.hardness):
                return True
        return False

    def _client_launch_args(self) -> list[str]:
        host, port = self.hub.address
        args = ["--primary", f"{host}:{port}",
                "--health-period", str(self.options.health.period),
                "--max-non-active", str(self.options.health.max_non_active)]
        if self.options.client_cpus:
            args += ["--cpus", str(self.options.client_cpus)]
        return args

    def _create_instances(self, now: float) -> None:
        s = self.state
        if self.engine is None or s.frozen:
            return
        if self.options.backup_enabled and s.backup is None:
            if self.backoff.ready(now):
                self.create_backup(now)
            return
        n_clients = len(s.clients)
        if n_clients >= self.options.max_clients or not self.work_remaining():
            return
        if not self.backoff.ready(now):
            return
        try:
            h = self.engine.create_instance("client", self._client_launch_args())
        except BusyError as exc:
            log.info("%s: client creation deferred: %s", self.name, exc)
            self.backoff.failure(now)
            return
        except EngineError as exc:
            log.error("%s: client creation failed: %s", self.name, exc)
            self.backoff.failure(now)
            return
        self.backoff.success(now)
        s.clients[h.name] = ClientRecord(h.name, created_at=now)
        self.trace.record(self.name, "create_client", role=self.role, client=h.name)

    def snapshot(self, path=None) -> Path:
        if path is None:
            path = self.output_dir / "snapshots" / f"{self.name}-{self._snapshot_count}.jsonl"
            self._snapshot_count += 1
        return write_snapshot(path, self.state, self.options, self.name, self.hub.address)

    def create_backup(self, now: float) -> None:
        """Freeze, snapshot, and start a backup server from the snapshot.

        The state stays frozen until the backup shakes hands."""
        self._freeze()
        path = self.snapshot()
        host, port = self.hub.address
        try:
            h = self.engine.create_instance("server", ["--snapshot", str(path),
                                                       "--primary", f"{host}:{port}"])
        except EngineError as exc:
            log.info("%s: backup creation deferred: %s", self.name, exc)
            self.backoff.failure(now)
            self._unfreeze()
            return
        self.backoff.success(now)
        self.state.backup = BackupRecord(h.name, created_at=now)
        self.trace.record(self.name, "create_backup", role=self.role, backup=h.name,
                          snapshot=str(path))

    def detect_unhealthy(self, now: float) -> list[str]:
        h = self.options.health
        out = []
        for cid, rec in self.state.clients.items():
            if rec.handshaken:
                if now - rec.last_health > h.limit:
                    out.append(cid)
            elif now - rec.created_at > h.max_non_active:
                out.append(cid)
        b = self.state.backup
        if b is not None:
            if b.handshaken and now - b.last_health > h.limit:
                out.append(b.name)
            elif not b.handshaken and now - b.created_at > h.max_non_active:
                out.append(b.name)
        return out

    def _reap_unhealthy(self, now: float) -> None:
        for name in self.detect_unhealthy(now):
            b = self.state.backup
            if b is not None and name == b.name:
                self.trace.record(self.name, "backup_unhealthy", role=self.role,
                                  backup=name)
                if self.engine is not None:
                    self.engine.terminate_instance(name)
                self.hub.drop("backup")
                self.state.backup = None
                self._unfreeze()
                self.backoff.failure(now)
                continue
            if self.state.frozen:
                continue  # reassignment waits for the backup
            if self.engine is not None:
                self.engine.terminate_instance(name)
            self.fail_client(name)
            self._control("backup", Kind.CLIENT_TERMINATED, client_id=name)

    def all_done(self) -> bool:
        s = self.state
        for st in s.task_status.values():
            if st.state is Status.ASSIGNED:
                return False
        return not self.work_remaining()

    def finalize_results(self) -> ResultTable:
        s = self.state
        # Whatever is left unassigned is pruned.
        for t in s.ordered_tasks:
            if s.task_status[t.task_id].state in (Status.PENDING, Status.REASSIGNABLE):
                s.set_status(t.task_id, Status.SKIPPED)
        s.tasks_from_failed = []
        s.next_task_cursor = len(s.ordered_tasks)
        return finalize(s.ordered_tasks, s.task_status, s.results,
                        self.options.result_titles, s.min_group_size,
                        self.options.group_titles)

    def finalize_and_write(self) -> ResultTable:
        table = self.finalize_results()
        self.results_table = table
        if self.role == PRIMARY:
            write_results(table, self.output_dir)
        self.state.results_written = True
        self.trace.record(self.name, "results_written", role=self.role,
                          rows=len(table.rows))
        return table

    # backup role -------------------------------------------------------

    def assume_backup_role(self, wait: float | None = None) -> None:
        """Connect to the clients and then to the primary; promote at once
        if the primary does not answer."""
        s = self.state
        s.role = BACKUP
        s.frozen = False
        s.backup = None
        now = time.time()
        for rec in s.clients.values():
            rec.last_health = now
        self.trace.record(self.name, "assume_backup", role=self.role)
        carry = []
        for cid in self._active_clients():
            rec = s.clients[cid]
            self.hub.connect(("client", cid), rec.address, rec.port,
                             hello=P.handshake(self.name, self.ctl_seq(), BACKUP,
                                               *self.hub.address),
                             connect_timeout=self.options.health.limit)
        wait = self.options.health.limit if wait is None else wait
        waiting = set(self._active_clients())
        deadline = time.monotonic() + wait
        while waiting and time.monotonic() < deadline:
            self._check_due()
            for link, env in self._collect(self.tick):
                if link.role == "client" and env.kind is Kind.HANDSHAKE:
                    waiting.discard(env.sender_id)
                else:
                    carry.append((link, env))
        if waiting:
            log.warning("%s: clients %s did not connect back", self.name, sorted(waiting))
        if self.primary_address is None:
            self.promote_to_primary()
            return
        self.hub.connect("primary", *self.primary_address,
                         hello=P.handshake(self.name, self.ctl_seq(), BACKUP,
                                           *self.hub.address),
                         connect_timeout=self.options.health.limit)
        deadline = time.monotonic() + self.options.health.limit
        connected = False
        while time.monotonic() < deadline and not connected:
            self._check_due()
            for link, env in self._collect(self.tick):
                if link.role == PRIMARY and env.kind is Kind.HANDSHAKE:
                    connected = True
                else:
                    carry.append((link, env))
        for item in carry:
            self.hub.inbox.put(item)
        if not connected:
            self.trace.record(self.name, "primary_unreachable", role=self.role)
            self.promote_to_primary()
            return
        self.last_primary_health = time.time()
        self.trace.record(self.name, "backup_ready", role=self.role)

    def backup_iteration(self, now: float | None = None, items=None) -> None:
        now = time.time() if now is None else now
        if items is None:
            items = self.hub.drain()
        if now - self._last_health_sent >= self.options.health.period:
            self._last_health_sent = now
            self.hub.send("primary", Envelope(Kind.HEALTH_UPDATE, self.name,
                                              self.ctl_seq(), {}))
        for link, env in items:
            if link.role == PRIMARY:
                self._on_primary_message(env, now)
            elif link.role == "client":
                self._on_direct_copy(env, now)
        if self.role == BACKUP and now - self.last_primary_health > self.options.health.limit:
            self.promote_to_primary()

    def _on_primary_message(self, env: Envelope, now: float) -> None:
        s = self.state
        if env.kind is Kind.HEALTH_UPDATE:
            self.last_primary_health = now
        elif env.kind is Kind.NEW_CLIENT:
            cid = env.body["client_id"]
            rec = s.clients.setdefault(cid, ClientRecord(cid, created_at=now))
            rec.address, rec.port = env.body["address"], env.body["port"]
            rec.handshaken = True
            rec.last_health = now
            self.hub.connect(("client", cid), rec.address, rec.port,
                             hello=P.handshake(self.name, self.ctl_seq(), BACKUP,
                                               *self.hub.address))
            self.trace.record(self.name, "new_client", role=self.role, client=cid)
        elif env.kind is Kind.CLIENT_TERMINATED:
            if env.body["client_id"] in s.clients:
                self.fail_client(env.body["client_id"])
        elif env.kind in P.CLIENT_KINDS:
            self.last_primary_health = now
            for i, held in enumerate(self.held):
                if P.dedup_match(held, env):
                    del self.held[i]
                    break
            else:
                self.forwarded_keys.add(env.key)
            self.handle_message(env)

    def _on_direct_copy(self, env: Envelope, now: float) -> None:
        if env.kind is Kind.HEALTH_UPDATE:
            rec = self.state.clients.get(env.sender_id)
            if rec is not None:
                rec.last_health = now
            return
        if env.kind not in P.CLIENT_KINDS:
            return
        if env.key in self.forwarded_keys:
            self.forwarded_keys.discard(env.key)
            return
        self.held.append(env)

    def promote_to_primary(self) -> None:
        s = self.state
        s.role = PRIMARY
        s.backup = None
        s.frozen = False
        self.hub.drop("primary")
        self.trace.record(self.name, "promote", role=self.role, held=len(self.held))
        log.info("%s: promoted to primary (%d held messages)", self.name, len(self.held))
        swap = Envelope(Kind.SWAP_QUEUES, self.name, self.ctl_seq(), {})
        for cid in self._active_clients():
            rec = s.clients[cid]
            ok = self.hub.send_once(rec.address, rec.port, swap)
            self.trace.record(self.name, "send", role=self.role, to=str(("client", cid)),
                              kind=Kind.SWAP_QUEUES.value, seq=swap.seq,
                              sender=self.name, body={}, ok=ok)
            if ok:
                self._control(("client", cid), Kind.RESUME)
            else:
                if self.engine is not None:
                    self.engine.terminate_instance(cid)
                self.fail_client(cid)
        held, self.held = self.held, []
        self.forwarded_keys.clear()
        for env in held:
            if env.sender_id in s.clients:
                self.handle_message(env)
        self._cleanup_dangling()
        now = time.time()
        for rec in s.clients.values():
            rec.last_health = max(rec.last_health, now)
            if not rec.handshaken:
                rec.created_at = max(rec.created_at, now)

    def _cleanup_dangling(self) -> None:
        if self.engine is None:
            return
        removed = []
        for h in self.engine.list_instances():
            if h.name == self.name:
                continue
            if h.kind == "client" and h.name not in self.state.clients:
                self.engine.terminate_instance(h)
                removed.append(h.name)
            elif h.kind == "server" and h.name == self.primary_name:
                self.engine.terminate_instance(h)
                removed.append(h.name)
        if self.primary_name is not None and self.primary_name not in removed:
            self.engine.terminate_instance(self.primary_name)
        self.trace.record(self.name, "dangling_cleanup", role=self.role, removed=removed)
