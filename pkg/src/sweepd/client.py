"""The client node: pulls tasks and runs each in its own worker process."""
from __future__ import annotations

import argparse
import enum
import logging
import multiprocessing as mp
import os
import time
from collections import deque
from dataclasses import dataclass, field

from . import protocol as P
from ._forkmain import start_fork_server
from .net import Hub
from .node import InstanceKilled, Node
from .protocol import Envelope, Kind
from .task import TaskDescriptor, dominates

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NO_PRIMARY = 2
EXIT_ORPHANED = 3


def worker_main(conn, task_id: int, payload: str) -> None:
    """Entry point of a worker process."""
    from .workloads import run_payload
    conn.send_bytes(P.encode_worker(P.WORKER_STARTED, task_id))
    values, titles = run_payload(payload)
    conn.send_bytes(P.encode_worker(P.WORKER_DONE, task_id, values, titles))
    conn.close()


class SlotState(enum.Enum):
    STARTING = "Starting"
    RUNNING = "Running"
    DONE = "Done"
    TERMINATED = "Terminated"


@dataclass
class WorkerSlot:
    task: TaskDescriptor
    process: object
    conn: object
    started_at: float | None = None
    state: SlotState = SlotState.STARTING

    @property
    def busy(self) -> bool:
        return self.state in (SlotState.STARTING, SlotState.RUNNING)


@dataclass
class ClientState:
    client_id: str
    cpu_count: int
    workers: dict = field(default_factory=dict)
    pending_granted: deque = field(default_factory=deque)
    requests: deque = field(default_factory=deque)  # counts of unanswered requests
    no_further_received: bool = False
    stopped: bool = False
    outbox_buffer: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.cpu_count < 1:
            raise ValueError("cpu_count must be >= 1")

    @property
    def outstanding_request_count(self) -> int:
        return sum(self.requests)

    @property
    def live_workers(self) -> int:
        return sum(1 for s in self.workers.values() if s.busy)

    def idle(self) -> int:
        return (self.cpu_count - self.live_workers - len(self.pending_granted)
                - self.outstanding_request_count)

    def finished(self) -> bool:
        return (self.no_further_received and not self.stopped
                and not self.workers and not self.pending_granted
                and not self.requests)


def parse_client_args(argv: list[str]) -> argparse.Namespace:
    p = argparse.ArgumentParser(prog="sweepd client")
    p.add_argument("--primary", required=True, help="HOST:PORT of the primary server")
    p.add_argument("--name", required=True, help="client id")
    p.add_argument("--cpus", type=int, default=None)
    p.add_argument("--host", default="127.0.0.1", help="address to listen on")
    p.add_argument("--health-period", type=float, default=2.0)
    p.add_argument("--max-non-active", type=float, default=90.0)
    return p.parse_args(argv)


class Client(Node):
    role = "client"

    def __init__(self, client_id: str, primary: tuple, cpus: int | None = None,
                 host: str = "127.0.0.1", health_period: float = 2.0,
                 max_non_active: float = 90.0, trace=None, faults=None,
                 start_method: str = "forkserver"):
        super().__init__(client_id, Hub(client_id, host), trace, faults)
        self.state = ClientState(client_id, cpus or os.cpu_count() or 1)
        self.primary_address = tuple(primary)
        self.health_period = health_period
        self.max_non_active = max_non_active
        self.mp = mp.get_context(start_method)
        if start_method == "forkserver":
            # worker_main's module is preloaded so workers skip the import
            self.mp.set_forkserver_preload(["sweepd._forkmain", "sweepd.client",
                                            "sweepd.workloads"])
        self.seq = P.Sequencer()
        self.health_seq = P.Sequencer()
        self.primary_peer: str | None = None
        self.backup_peer: str | None = None
        self.held: dict = {}          # backup-channel copies not yet seen from the primary
        self.processed: set = set()   # keys acted on from the primary channel
        self._last_health = -1e9
        self._primary_lost_at: float | None = None
        self.exit_code: int | None = None

    @classmethod
    def from_args(cls, opts: argparse.Namespace, trace=None, faults=None, **overrides):
        host, _, port = opts.primary.rpartition(":")
        kw = dict(cpus=opts.cpus, host=opts.host, health_period=opts.health_period,
                  max_non_active=opts.max_non_active)
        kw.update(overrides)
        return cls(opts.name, (host or "127.0.0.1", int(port)), trace=trace,
                   faults=faults, **kw)

    # outbound ----------------------------------------------------------

    def _hello(self) -> Envelope:
        return P.handshake(self.name, self.seq(), "client", *self.hub.address)

    def emit(self, kind: Kind, **body) -> Envelope:
        """Send a message to the primary and mirror it to the backup with the
        same seq; buffered while stopped."""
        env = Envelope(kind, self.name, self.seq(), body)
        if self.state.stopped:
            self.state.outbox_buffer.append(env)
        else:
            self._deliver(env)
        return env

    def _deliver(self, env: Envelope) -> None:
        self._send("primary", env)
        if "backup" in self.hub.out:
            self.hub.send("backup", env)

    def _log(self, text: str, kind: Kind = Kind.LOG, **extra) -> None:
        self.emit(kind, text=text, timestamp=time.time(), **extra)

    def _health(self, now: float) -> None:
        if now - self._last_health < self.health_period:
            return
        self._last_health = now
        env = Envelope(Kind.HEALTH_UPDATE, self.name, self.health_seq(), {})
        self.hub.send("primary", env)
        self.hub.send("backup", env)

    # main loop ---------------------------------------------------------

    def run(self) -> int:
        try:
            self.exit_code = self._run()
        except InstanceKilled:
            self.exit_code = None
        finally:
            self._kill_all_workers()
            self.trace.record(self.name, "stopped", role=self.role,
                              exit_code=self.exit_code, killed=self.killed)
            if not self.killed:
                self.close()
        return self.exit_code

    def _run(self) -> int:
        self.hub.connect("primary", *self.primary_address, hello=self._hello(),
                         connect_timeout=self.max_non_active)
        if not self._await_primary_handshake():
            log.error("%s: no handshake from the primary at %s:%s", self.name,
                      *self.primary_address)
            return EXIT_NO_PRIMARY
        while not self._stop.is_set():
            self._check_due()
            now = time.time()
            self._health(now)
            self.process_workers(now)
            self._request(now)
            for link, env in self._collect(self.tick):
                self.handle_server_message(link, env)
            self.spawn_workers()
            if self.state.finished():
                self.emit(Kind.BYE)
                self.trace.record(self.name, "bye", role=self.role)
                for key in ("primary", "backup"):
                    ob = self.hub.out.get(key)
                    if ob is not None:
                        ob.flush()
                return EXIT_OK
            if self._orphaned(now):
                log.error("%s: lost the primary and no backup took over", self.name)
                return EXIT_ORPHANED
        return EXIT_OK

    def _await_primary_handshake(self) -> bool:
        deadline = time.monotonic() + self.max_non_active
        early = []
        while time.monotonic() < deadline:
            self._check_due()
            item = self.hub.get(timeout=0.05)
            if item is None:
                ob = self.hub.out.get("primary")
                if ob is not None and not ob.alive:
                    return False
                continue
            link, env = item
            if env.kind is Kind.HANDSHAKE and env.body["kind"] == "primary":
                self.primary_peer = env.sender_id
                self.trace.record(self.name, "handshake", role=self.role,
                                  primary=env.sender_id)
                for it in early:
                    self.hub.inbox.put(it)
                return True
            early.append(item)
        return False

    def _orphaned(self, now: float) -> bool:
        ob = self.hub.out.get("primary")
        if ob is None or ob.alive:
            self._primary_lost_at = None
            return False
        if self._primary_lost_at is None:
            self._primary_lost_at = now
        return now - self._primary_lost_at > self.max_non_active

    def _request(self, now: float) -> None:
        s = self.state
        if s.stopped or s.no_further_received:
            return
        idle = s.idle()
        if idle > 0:
            s.requests.append(idle)
            self.emit(Kind.REQUEST_TASKS, count=idle)
        assert s.outstanding_request_count + s.live_workers + len(s.pending_granted) \
            <= s.cpu_count

    # workers -----------------------------------------------------------

    def spawn_workers(self) -> None:
        s = self.state
        if s.pending_granted and self.mp.get_start_method() == "forkserver":
            start_fork_server()
        while s.pending_granted and s.live_workers < s.cpu_count:
            task = s.pending_granted.popleft()
            parent, child = self.mp.Pipe(duplex=False)
            proc = self.mp.Process(target=worker_main,
                                   args=(child, task.task_id, task.payload), daemon=True)
            proc.start()
            child.close()
            s.workers[task.task_id] = WorkerSlot(task, proc, parent)
            self.trace.record(self.name, "spawn", role=self.role, task_id=task.task_id)
        assert s.live_workers <= s.cpu_count

    def _drain(self, slot: WorkerSlot, now: float) -> None:
        while True:
            try:
                if not slot.conn.poll():
                    return
                msg = P.decode_worker(slot.conn.recv_bytes())
            except (EOFError, OSError):
                return
            except P.ProtocolError as exc:
                log.warning("%s: bad worker message: %s", self.name, exc)
                continue
            if not slot.busy:
                continue
            tid = slot.task.task_id
            if msg["kind"] == P.WORKER_STARTED:
                slot.state = SlotState.RUNNING
                slot.started_at = now
                self._log(f"task {tid} started", event="worker_started", task_id=tid)
            else:
                slot.state = SlotState.DONE
                self.emit(Kind.RESULT, task_id=tid, result_values=msg["result_values"],
                          result_titles=msg["result_titles"])
                self._log(f"task {tid} done", event="worker_done", task_id=tid)

    def process_workers(self, now: float | None = None) -> None:
        now = time.time() if now is None else now
        for tid, slot in list(self.state.workers.items()):
            self._drain(slot, now)
            proc = slot.process
            if not proc.is_alive():
                proc.join(timeout=0)
                if slot.busy:
                    self._log(f"task {tid} worker exited with code {proc.exitcode}"
                              " without a result", Kind.EXCEPTION,
                              event="worker_crashed", task_id=tid)
                    self.trace.record(self.name, "worker_crashed", role=self.role,
                                      task_id=tid, exitcode=proc.exitcode)
                slot.conn.close()
                del self.state.workers[tid]
                continue
            if slot.state is SlotState.RUNNING and now - slot.started_at > slot.task.timeout:
                self._terminate(slot)
                self.emit(Kind.REPORT_HARD_TASK, hardness=list(slot.task.hardness),
                          task_id=tid)
                self.trace.record(self.name, "timeout", role=self.role, task_id=tid,
                                  hardness=list(slot.task.hardness))

    def _terminate(self, slot: WorkerSlot) -> None:
        slot.state = SlotState.TERMINATED
        try:
            slot.process.kill()
        except OSError as exc:
            # the slot stays until the process is reaped; a later pass retries
            self._log(f"kill of task {slot.task.task_id} failed: {exc}", Kind.EXCEPTION)

    def _kill_all_workers(self) -> None:
        for slot in list(self.state.workers.values()):
            if slot.process.is_alive():
                try:
                    slot.process.kill()
                except OSError:
                    pass
            slot.process.join(timeout=1)
        self.state.workers.clear()

    def apply_domino(self, hardness) -> list[int]:
        killed = []
        for tid, slot in self.state.workers.items():
            if slot.busy and dominates(slot.task.hardness, hardness):
                self._terminate(slot)
                killed.append(tid)
        kept = deque()
        for t in self.state.pending_granted:
            if dominates(t.hardness, hardness):
                killed.append(t.task_id)
            else:
                kept.append(t)
        self.state.pending_granted = kept
        for tid in killed:
            self._log(f"task {tid} terminated by domino effect",
                      event="domino_terminated", task_id=tid)
        self.trace.record(self.name, "domino", role=self.role,
                          hardness=list(hardness), killed=killed)
        return killed

    # inbound -----------------------------------------------------------

    def handle_server_message(self, link, env: Envelope) -> None:
        kind = env.kind
        if kind is Kind.HANDSHAKE:
            self._on_handshake(env)
        elif kind is Kind.STOP:
            self.state.stopped = True
            self.trace.record(self.name, "stop", role=self.role, sender=env.sender_id)
        elif kind is Kind.RESUME:
            self.state.stopped = False
            while self.state.outbox_buffer:
                self._deliver(self.state.outbox_buffer.popleft())
            self.trace.record(self.name, "resume", role=self.role, sender=env.sender_id)
        elif kind is Kind.SWAP_QUEUES:
            self.swap_queues(env.sender_id)
        elif kind in P.REPLICATED_SERVER_KINDS:
            if link.peer_id == self.primary_peer:
                self._act(env)
            elif link.peer_id == self.backup_peer:
                if env.key not in self.processed:
                    self.held[env.key] = env
            else:
                log.debug("%s: ignoring %s from %s", self.name, kind.value, link.peer_id)

    def _on_handshake(self, env: Envelope) -> None:
        role = env.body["kind"]
        if role == "backup":
            self.backup_peer = env.sender_id
            self.held.clear()
            self.hub.connect("backup", env.body["listen_address"],
                             env.body["listen_port"], hello=self._hello())
            self.trace.record(self.name, "backup_connected", role=self.role,
                              backup=env.sender_id)
        elif role == "primary" and self.primary_peer is None:
            self.primary_peer = env.sender_id

    def swap_queues(self, sender: str) -> None:
        if sender == self.primary_peer:
            return
        self.primary_peer, self.backup_peer = sender, self.primary_peer
        self.hub.rekey("backup", "primary")
        self._primary_lost_at = None
        self.trace.record(self.name, "swap", role=self.role, primary=sender,
                          held=len(self.held))
        held = sorted(self.held.values(), key=lambda e: e.seq)
        self.held.clear()
        for env in held:
            self._act(env)

    def _act(self, env: Envelope) -> None:
        self.held.pop(env.key, None)
        if env.key in self.processed:
            return
        self.processed.add(env.key)
        self._record_recv(env, env.sender_id)
        s = self.state
        if env.kind is Kind.GRANT_TASKS:
            if s.requests:
                s.requests.popleft()
            tasks = env.tasks()
            s.pending_granted.extend(tasks)
            self._log(f"granted tasks {[t.task_id for t in tasks]}")
        elif env.kind is Kind.NO_FURTHER_TASKS:
            if s.requests:
                s.requests.popleft()
            s.no_further_received = True
            self._log("no further tasks")
        elif env.kind is Kind.APPLY_DOMINO_EFFECT:
            self.apply_domino(env.body["hardness"])
        self._observe("recv", env, origin=env.sender_id)
