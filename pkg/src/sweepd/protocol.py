"""Wire messages exchanged between servers, clients and workers.

Every message is an :class:`Envelope` encoded as one JSON object per line.
Clients send each logical message to both servers with the same ``seq`` so
that the backup can match the copy forwarded by the primary against the
copy it received directly.
"""
from __future__ import annotations

import enum
import itertools
import json
import time
from dataclasses import dataclass, field
from typing import Any

from .task import TaskDescriptor


class ProtocolError(ValueError):
    """Raised for lines that cannot be decoded into a valid envelope."""


class SerializationError(ValueError):
    pass


class Kind(str, enum.Enum):
    HANDSHAKE = "HANDSHAKE"
    HEALTH_UPDATE = "HEALTH_UPDATE"
    REQUEST_TASKS = "REQUEST_TASKS"
    GRANT_TASKS = "GRANT_TASKS"
    NO_FURTHER_TASKS = "NO_FURTHER_TASKS"
    RESULT = "RESULT"
    REPORT_HARD_TASK = "REPORT_HARD_TASK"
    APPLY_DOMINO_EFFECT = "APPLY_DOMINO_EFFECT"
    LOG = "LOG"
    EXCEPTION = "EXCEPTION"
    BYE = "BYE"
    STOP = "STOP"
    RESUME = "RESUME"
    SWAP_QUEUES = "SWAP_QUEUES"
    NEW_CLIENT = "NEW_CLIENT"
    CLIENT_TERMINATED = "CLIENT_TERMINATED"


# Messages a client sends to the servers; mirrored to the backup.
CLIENT_KINDS = frozenset({Kind.REQUEST_TASKS, Kind.RESULT, Kind.REPORT_HARD_TASK,
                          Kind.LOG, Kind.EXCEPTION, Kind.BYE})
# Server-to-client messages produced by replicated state transitions; the
# backup emits identical copies and the client deduplicates them.
REPLICATED_SERVER_KINDS = frozenset({Kind.GRANT_TASKS, Kind.NO_FURTHER_TASKS,
                                     Kind.APPLY_DOMINO_EFFECT})

HANDSHAKE_ROLES = ("client", "backup", "primary")

_REQUIRED: dict[Kind, tuple[str, ...]] = {
    Kind.HANDSHAKE: ("kind", "listen_address", "listen_port"),
    Kind.REQUEST_TASKS: ("count",),
    Kind.GRANT_TASKS: ("tasks",),
    Kind.RESULT: ("task_id", "result_values", "result_titles"),
    Kind.REPORT_HARD_TASK: ("hardness", "task_id"),
    Kind.APPLY_DOMINO_EFFECT: ("hardness",),
    Kind.LOG: ("text", "timestamp"),
    Kind.EXCEPTION: ("text", "timestamp"),
    Kind.NEW_CLIENT: ("client_id", "address", "port"),
    Kind.CLIENT_TERMINATED: ("client_id",),
}


def _plain(value: Any) -> Any:
    """Convert tuples (recursively) to lists so values compare equal after
    a JSON round trip."""
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, enum.Enum):
        return value.value
    return value


def validate_body(kind: Kind, body: dict) -> None:
    missing = [k for k in _REQUIRED.get(kind, ()) if k not in body]
    if missing:
        raise ProtocolError(f"{kind.value} body missing {missing}")
    if kind is Kind.REQUEST_TASKS:
        count = body["count"]
        if not isinstance(count, int) or isinstance(count, bool) or count < 1:
            raise ProtocolError("REQUEST_TASKS count must be an integer >= 1")
    elif kind is Kind.HANDSHAKE and body["kind"] not in HANDSHAKE_ROLES:
        raise ProtocolError(f"unknown handshake role {body['kind']!r}")
    elif kind is Kind.GRANT_TASKS and not isinstance(body["tasks"], list):
        raise ProtocolError("GRANT_TASKS tasks must be a list")


@dataclass(frozen=True)
class Envelope:
    kind: Kind
    sender_id: str
    seq: int
    body: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "body", _plain(dict(self.body)))
        validate_body(self.kind, self.body)

    @property
    def key(self) -> tuple:
        return (self.sender_id, self.seq, self.kind)

    def tasks(self) -> list[TaskDescriptor]:
        return [TaskDescriptor.from_dict(d) for d in self.body.get("tasks", [])]

    def summary(self) -> dict:
        """Compact body for traces: task payloads are dropped."""
        if self.kind is Kind.GRANT_TASKS:
            return {"task_ids": [t["task_id"] for t in self.body["tasks"]]}
        return self.body


def encode(env: Envelope) -> bytes:
    record = {"kind": env.kind.value, "sender_id": env.sender_id,
              "seq": env.seq, "body": env.body}
    try:
        text = json.dumps(record, separators=(",", ":"), allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise SerializationError(str(exc)) from exc
    return text.encode("utf-8") + b"\n"


def decode(line: bytes | str) -> Envelope:
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(str(exc)) from exc
    line = line.strip()
    if not line:
        raise ProtocolError("empty line")
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed record: {exc}") from exc
    if not isinstance(record, dict):
        raise ProtocolError("record is not an object")
    try:
        kind = Kind(record["kind"])
    except (KeyError, ValueError):
        raise ProtocolError(f"unknown kind {record.get('kind')!r}") from None
    sender, seq, body = record.get("sender_id"), record.get("seq"), record.get("body", {})
    if not isinstance(sender, str) or not isinstance(seq, int) or not isinstance(body, dict):
        raise ProtocolError("bad envelope fields")
    return Envelope(kind, sender, seq, body)


def dedup_match(direct: Envelope, forwarded: Envelope) -> bool:
    return (direct.sender_id == forwarded.sender_id
            and direct.seq == forwarded.seq
            and direct.kind == forwarded.kind)


class Sequencer:
    """Monotone sequence numbers starting at 0."""

    def __init__(self, start: int = 0):
        self._it = itertools.count(start)

    def __call__(self) -> int:
        return next(self._it)


def now() -> float:
    return time.time()


# Constructors for the message bodies.

def handshake(sender: str, seq: int, role: str, address: str, port: int) -> Envelope:
    return Envelope(Kind.HANDSHAKE, sender, seq,
                    {"kind": role, "listen_address": address, "listen_port": port})


def grant_tasks(sender: str, seq: int, tasks: list[TaskDescriptor]) -> Envelope:
    return Envelope(Kind.GRANT_TASKS, sender, seq, {"tasks": [t.to_dict() for t in tasks]})


def log(sender: str, seq: int, text: str, kind: Kind = Kind.LOG, **extra) -> Envelope:
    return Envelope(kind, sender, seq, {"text": text, "timestamp": now(), **extra})


def empty(kind: Kind, sender: str, seq: int) -> Envelope:
    return Envelope(kind, sender, seq, {})


# Worker pipe messages use the same line encoding but their own kinds.
WORKER_STARTED = "WORKER_STARTED"
WORKER_DONE = "WORKER_DONE"


def encode_worker(kind: str, task_id: int, result_values=None,
                  result_titles=None) -> bytes:
    record: dict = {"kind": kind, "task_id": task_id, "timestamp": now()}
    if kind == WORKER_DONE:
        record["result_values"] = _plain(result_values)
        record["result_titles"] = _plain(result_titles)
    return json.dumps(record, allow_nan=False).encode("utf-8") + b"\n"


def decode_worker(line: bytes) -> dict:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(str(exc)) from exc
    if record.get("kind") not in (WORKER_STARTED, WORKER_DONE):
        raise ProtocolError(f"unknown worker message {record.get('kind')!r}")
    return record
