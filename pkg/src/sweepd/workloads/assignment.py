"""Agent assignment: ``n`` agents, ``m <= n`` sequential tasks, each agent
does at most one task, minimise total time.

Three search variants are compared: exhaustive enumeration, branch and
bound, and branch and bound with an admissible lower bound on the cost of
the remaining tasks.
"""
from __future__ import annotations

import enum
import json
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..task import TaskDescriptor
from . import _bnb_py
from .kernels import get_kernel

PARAMETER_TITLES = ("n_tasks", "n_agents", "id", "Options")
GROUP_TITLES = ("n_tasks", "n_agents", "Options")
RESULT_TITLES = ("optimal_cost", "nodes_expanded", "elapsed_sec")
COST_RANGE = (1, 100)


class Option(str, enum.Enum):
    NO_CUTOFFS = "NO_CUTOFFS"
    HEURISTIC = "HEURISTIC"


VARIANTS = (frozenset({Option.NO_CUTOFFS}), frozenset(), frozenset({Option.HEURISTIC}))


def check_options(options: Iterable[Option]) -> frozenset:
    options = frozenset(Option(o) for o in options)
    if {Option.NO_CUTOFFS, Option.HEURISTIC} <= options:
        raise ValueError("NO_CUTOFFS and HEURISTIC are mutually exclusive")
    return options


def options_hardness(options: Iterable[Option]) -> int:
    options = check_options(options)
    if Option.HEURISTIC in options:
        return 0
    if Option.NO_CUTOFFS in options:
        return 2
    return 1


def options_str(options: Iterable[Option]) -> str:
    return "{" + ",".join(sorted(o.value for o in check_options(options))) + "}"


def _mode(options: frozenset) -> int:
    if Option.NO_CUTOFFS in options:
        return _bnb_py.MODE_NO_CUTOFFS
    if Option.HEURISTIC in options:
        return _bnb_py.MODE_HEURISTIC
    return _bnb_py.MODE_BNB


@dataclass(frozen=True)
class AssignmentInstance:
    n_tasks: int
    n_agents: int
    costs: tuple  # costs[agent][task]
    instance_id: int = 0
    seed: int = 0

    def __post_init__(self):
        costs = tuple(tuple(int(c) for c in row) for row in self.costs)
        object.__setattr__(self, "costs", costs)
        if not 1 <= self.n_tasks <= self.n_agents:
            raise ValueError("need n_agents >= n_tasks >= 1")
        if len(costs) != self.n_agents or any(len(r) != self.n_tasks for r in costs):
            raise ValueError("cost matrix must be n_agents x n_tasks")
        if any(c < 1 for r in costs for c in r):
            raise ValueError("costs must be positive")

    @classmethod
    def from_costs(cls, costs: Sequence[Sequence[int]], instance_id: int = 0):
        return cls(n_tasks=len(costs[0]), n_agents=len(costs), costs=costs,
                   instance_id=instance_id)

    def parameters(self) -> tuple:
        return (self.n_tasks, self.n_agents, self.instance_id)

    def to_dict(self) -> dict:
        return {"n_tasks": self.n_tasks, "n_agents": self.n_agents,
                "costs": [list(r) for r in self.costs],
                "instance_id": self.instance_id, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "AssignmentInstance":
        return cls(d["n_tasks"], d["n_agents"], d["costs"], d["instance_id"], d["seed"])


@dataclass(frozen=True)
class SearchResult:
    optimal_cost: int
    assignment: dict  # task -> agent
    nodes_expanded: int
    elapsed: float


def generate_instances(n_tasks: int, n_agents: int, first_id: int = 0,
                       last_id: int = 0, seed: int = 0) -> list[AssignmentInstance]:
    """Instances with integer costs uniform on [1, 100].

    Each instance depends only on ``(seed, n_tasks, n_agents, id)``.
    """
    if not 1 <= n_tasks <= n_agents:
        raise ValueError(f"invalid sizes n_tasks={n_tasks}, n_agents={n_agents}")
    if last_id < first_id:
        raise ValueError("last_id must be >= first_id")
    lo, hi = COST_RANGE
    out = []
    for iid in range(first_id, last_id + 1):
        rng = np.random.default_rng([seed, n_tasks, n_agents, iid])
        costs = rng.integers(lo, hi + 1, size=(n_agents, n_tasks))
        out.append(AssignmentInstance(n_tasks, n_agents, costs.tolist(), iid, seed))
    return out


def solve(instance: AssignmentInstance, options: Iterable[Option] = (),
          backend: str = "auto") -> SearchResult:
    options = check_options(options)
    kernel = get_kernel(backend)
    start = time.perf_counter()
    cost, assign, nodes = kernel([list(r) for r in instance.costs], _mode(options))
    elapsed = time.perf_counter() - start
    return SearchResult(cost, {j: a for j, a in enumerate(assign)}, nodes, elapsed)


def lower_bound(instance: AssignmentInstance, partial: Sequence[int]) -> int:
    """Sum over unassigned tasks of the cheapest unused agent, letting one
    agent serve several remaining tasks."""
    used = [False] * instance.n_agents
    for agent in partial:
        used[agent] = True
    if len(partial) >= instance.n_tasks:
        return 0
    return _bnb_py.remaining_bound(instance.costs, used, len(partial))


def make_task(task_id: int, instance: AssignmentInstance, options: Iterable[Option],
              timeout: float = 60.0, inject: dict | None = None) -> TaskDescriptor:
    options = check_options(options)
    payload = {"workload": "assignment",
               "instance": instance.to_dict(),
               "options": sorted(o.value for o in options)}
    if inject:
        payload["inject"] = inject
    return TaskDescriptor.build(
        task_id,
        parameters=instance.parameters() + (options_str(options),),
        parameter_titles=PARAMETER_TITLES,
        hardness=(options_hardness(options), instance.n_tasks, instance.n_agents),
        group_titles=GROUP_TITLES,
        timeout=timeout,
        payload=json.dumps(payload, sort_keys=True))


def build_task_list(max_m: int, per_setting: int, timeout: float = 60.0,
                    seed: int = 0) -> list[TaskDescriptor]:
    if max_m < 2 or per_setting < 1:
        raise ValueError("need max_m >= 2 and per_setting >= 1")
    tasks = []
    for options in VARIANTS:
        for m in range(2, max_m + 1):
            for n in range(m, 2 * m):
                for inst in generate_instances(m, n, 0, per_setting - 1, seed):
                    tasks.append(make_task(len(tasks), inst, options, timeout))
    return tasks


def run(payload: dict) -> tuple:
    instance = AssignmentInstance.from_dict(payload["instance"])
    res = solve(instance, payload.get("options", ()))
    return (res.optimal_cost, res.nodes_expanded, round(res.elapsed, 6))
