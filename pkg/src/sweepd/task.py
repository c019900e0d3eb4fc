"""Tasks, the hardness partial order and timeout-based pruning."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

Hardness = tuple  # tuple[int, ...]


class InvariantViolation(ValueError):
    pass


def as_hardness(values: Iterable[int]) -> Hardness:
    h = tuple(int(v) for v in values)
    if not h:
        raise InvariantViolation("hardness must be non-empty")
    return h


def _check_lengths(a: Sequence[int], b: Sequence[int]) -> None:
    if len(a) != len(b):
        raise InvariantViolation(
            f"hardness length mismatch: {len(a)} vs {len(b)}")


def dominates(a: Sequence[int], b: Sequence[int]) -> bool:
    """True if ``a`` is as hard or harder than ``b`` (componentwise >=)."""
    _check_lengths(a, b)
    return all(x >= y for x, y in zip(a, b))


class MinAntichain:
    """Minimal elements of a set of timed-out hardnesses.

    Only minimal elements are kept, which is enough to answer
    :meth:`prunes`: a hardness is pruned iff it dominates some inserted
    hardness, and any inserted hardness dominates some minimal one.
    """

    def __init__(self, elements: Iterable[Sequence[int]] = ()):
        self._elements: list[Hardness] = []
        for h in elements:
            self.insert(h)

    @property
    def elements(self) -> frozenset:
        return frozenset(self._elements)

    def __len__(self) -> int:
        return len(self._elements)

    def __iter__(self):
        return iter(sorted(self._elements))

    def __eq__(self, other: object) -> bool:
        if isinstance(other, MinAntichain):
            return self.elements == other.elements
        return NotImplemented

    def __repr__(self) -> str:
        return f"MinAntichain({sorted(self._elements)!r})"

    def insert(self, h: Sequence[int]) -> bool:
        """Insert ``h``; return True if the antichain changed."""
        h = as_hardness(h)
        for e in self._elements:
            if dominates(h, e):
                return False
        self._elements = [e for e in self._elements if not dominates(e, h)]
        self._elements.append(h)
        return True

    def prunes(self, h: Sequence[int]) -> bool:
        return any(dominates(h, e) for e in self._elements)

    def to_list(self) -> list[list[int]]:
        return [list(e) for e in sorted(self._elements)]


def antichain_insert(ac: MinAntichain, h: Sequence[int]) -> MinAntichain:
    out = MinAntichain(ac.elements)
    out.insert(h)
    return out


def is_pruned(ac: MinAntichain, h: Sequence[int]) -> bool:
    return ac.prunes(h)


@dataclass(frozen=True)
class TaskDescriptor:
    task_id: int
    original_index: int
    parameters: tuple
    parameter_titles: tuple
    hardness: Hardness
    group_key: tuple
    timeout: float
    payload: str = ""

    def __post_init__(self):
        if self.timeout <= 0:
            raise InvariantViolation("timeout must be positive")
        if len(self.parameters) != len(self.parameter_titles):
            raise InvariantViolation("parameters and titles differ in length")
        object.__setattr__(self, "parameters", tuple(self.parameters))
        object.__setattr__(self, "parameter_titles", tuple(self.parameter_titles))
        object.__setattr__(self, "hardness", as_hardness(self.hardness))
        object.__setattr__(self, "group_key", tuple(self.group_key))

    @classmethod
    def build(cls, task_id: int, parameters: Sequence[Any],
              parameter_titles: Sequence[str], hardness: Sequence[int],
              group_titles: Sequence[str], timeout: float = 60.0,
              payload: str = "", original_index: int | None = None):
        """Construct a descriptor whose group key is the projection of
        ``parameters`` onto ``group_titles``."""
        pos = {t: i for i, t in enumerate(parameter_titles)}
        try:
            key = tuple(parameters[pos[t]] for t in group_titles)
        except KeyError as exc:
            raise InvariantViolation(f"unknown group title {exc}") from None
        return cls(task_id=task_id,
                   original_index=task_id if original_index is None else original_index,
                   parameters=tuple(parameters),
                   parameter_titles=tuple(parameter_titles),
                   hardness=tuple(hardness), group_key=key,
                   timeout=timeout, payload=payload)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "original_index": self.original_index,
            "parameters": list(self.parameters),
            "parameter_titles": list(self.parameter_titles),
            "hardness": list(self.hardness),
            "group_key": list(self.group_key),
            "timeout": self.timeout,
            "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskDescriptor":
        return cls(task_id=int(d["task_id"]),
                   original_index=int(d["original_index"]),
                   parameters=tuple(d["parameters"]),
                   parameter_titles=tuple(d["parameter_titles"]),
                   hardness=tuple(d["hardness"]),
                   group_key=tuple(d["group_key"]),
                   timeout=float(d["timeout"]),
                   payload=d.get("payload", ""))


class Status(enum.Enum):
    PENDING = "Pending"
    ASSIGNED = "Assigned"
    DONE = "Done"
    TIMED_OUT = "TimedOut"
    SKIPPED = "Skipped"
    REASSIGNABLE = "Reassignable"


TERMINAL = frozenset({Status.DONE, Status.TIMED_OUT, Status.SKIPPED})

_LEGAL = {
    Status.PENDING: {Status.ASSIGNED, Status.SKIPPED},
    Status.ASSIGNED: {Status.DONE, Status.TIMED_OUT, Status.REASSIGNABLE,
                      Status.SKIPPED},
    Status.REASSIGNABLE: {Status.ASSIGNED, Status.SKIPPED},
}


@dataclass(frozen=True)
class TaskStatus:
    state: Status = Status.PENDING
    client_id: str | None = None

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL

    def to(self, state: Status, client_id: str | None = None) -> "TaskStatus":
        if state not in _LEGAL.get(self.state, ()):
            raise InvariantViolation(
                f"illegal status transition {self.state.value} -> {state.value}")
        return TaskStatus(state, client_id if state is Status.ASSIGNED else None)

    def to_dict(self) -> dict:
        d: dict = {"state": self.state.value}
        if self.client_id is not None:
            d["client_id"] = self.client_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskStatus":
        return cls(Status(d["state"]), d.get("client_id"))


def order_key(task: TaskDescriptor) -> tuple:
    # Lexicographic order on equal-length tuples is a linear extension of
    # componentwise dominance.
    return (task.hardness, task.original_index)


def order_tasks(tasks: Iterable[TaskDescriptor]) -> list[TaskDescriptor]:
    tasks = list(tasks)
    if tasks:
        n = len(tasks[0].hardness)
        if any(len(t.hardness) != n for t in tasks):
            raise InvariantViolation("hardness length mismatch in task list")
    return sorted(tasks, key=order_key)


def restore_original_order(tasks: Iterable[TaskDescriptor]) -> list[TaskDescriptor]:
    tasks = list(tasks)
    seen = set()
    for t in tasks:
        if t.original_index in seen:
            raise InvariantViolation(f"duplicate original_index {t.original_index}")
        seen.add(t.original_index)
    return sorted(tasks, key=lambda t: t.original_index)


def is_linear_extension(hardnesses: Sequence[Sequence[int]]) -> bool:
    """Brute-force check that no later element is strictly dominated by an
    earlier one."""
    for i, a in enumerate(hardnesses):
        for b in hardnesses[i + 1:]:
            if tuple(a) != tuple(b) and dominates(a, b):
                return False
    return True

