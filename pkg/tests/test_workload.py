import itertools
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sweepd.workloads import build_tasks, kernels, run_payload
from sweepd.workloads.assignment import (GROUP_TITLES, PARAMETER_TITLES, RESULT_TITLES,
                                         VARIANTS, AssignmentInstance, Option,
                                         build_task_list, check_options,
                                         generate_instances, lower_bound, make_task,
                                         options_hardness, solve)

from helpers import brute_assignment

BACKENDS = sorted(kernels.BACKENDS)


def cost_matrices(max_m=4):
    @st.composite
    def gen(draw):
        m = draw(st.integers(1, max_m))
        n = draw(st.integers(m, 2 * m - 1 if m > 1 else 2))
        return [[draw(st.integers(1, 100)) for _ in range(m)] for _ in range(n)]
    return gen()


def brute_remaining(costs, partial):
    """Optimal cost of the unassigned tasks given the partial assignment."""
    n, m = len(costs), len(costs[0])
    k = len(partial)
    free = [a for a in range(n) if a not in partial]
    if k == m:
        return 0
    return min(sum(costs[p[i]][k + i] for i in range(m - k))
               for p in itertools.permutations(free, m - k))


@pytest.mark.parametrize("backend", BACKENDS)
def test_two_by_two(backend):
    inst = AssignmentInstance.from_costs([[1, 2], [2, 1]])
    for options in VARIANTS:
        res = solve(inst, options, backend)
        assert res.optimal_cost == 2
        assert res.assignment == {0: 0, 1: 1}


@pytest.mark.parametrize("backend", BACKENDS)
def test_single_cell(backend):
    inst = AssignmentInstance.from_costs([[7]])
    assert all(solve(inst, o, backend).optimal_cost == 7 for o in VARIANTS)


@settings(max_examples=150, deadline=None)
@given(cost_matrices())
def test_variants_match_permutation_oracle(costs):
    inst = AssignmentInstance.from_costs(costs)
    want = brute_assignment(costs)
    for backend in BACKENDS:
        for options in VARIANTS:
            res = solve(inst, options, backend)
            assert res.optimal_cost == want
            # the returned assignment is injective and achieves the cost
            agents = list(res.assignment.values())
            assert len(set(agents)) == len(agents) == len(costs[0])
            assert sum(costs[a][j] for j, a in res.assignment.items()) == want


@settings(max_examples=150, deadline=None)
@given(cost_matrices())
def test_node_counts_monotone_across_variants(costs):
    inst = AssignmentInstance.from_costs(costs)
    nc, bb, he = (solve(inst, o).nodes_expanded for o in VARIANTS)
    assert he <= bb <= nc


def test_no_cutoffs_counts_every_node():
    # 1 root + n + n(n-1) + ... partial assignments of length <= m
    for m, n in [(2, 3), (3, 4), (3, 5)]:
        inst = generate_instances(m, n, seed=1)[0]
        want = sum(len(list(itertools.permutations(range(n), k))) for k in range(m + 1))
        assert solve(inst, {Option.NO_CUTOFFS}).nodes_expanded == want


@settings(max_examples=60, deadline=None)
@given(cost_matrices(), st.data())
def test_backends_agree_on_nodes(costs, data):
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernel not built")
    inst = AssignmentInstance.from_costs(costs)
    for options in VARIANTS:
        a, b = (solve(inst, options, be) for be in BACKENDS)
        assert (a.optimal_cost, a.nodes_expanded, a.assignment) == \
            (b.optimal_cost, b.nodes_expanded, b.assignment)


def test_lower_bound_examples():
    inst = AssignmentInstance.from_costs([[1, 2], [2, 1]])
    assert lower_bound(inst, []) == 2
    assert lower_bound(inst, [0, 1]) == 0


@settings(max_examples=150, deadline=None)
@given(cost_matrices(max_m=5), st.data())
def test_lower_bound_admissible(costs, data):
    inst = AssignmentInstance.from_costs(costs)
    n, m = len(costs), len(costs[0])
    k = data.draw(st.integers(0, m))
    partial = data.draw(st.permutations(range(n)))[:k]
    lb = lower_bound(inst, partial)
    free = [a for a in range(n) if a not in partial]
    assert lb == sum(min(costs[a][j] for a in free) for j in range(k, m))
    assert lb <= brute_remaining(costs, partial)


def test_generator_deterministic_and_shaped():
    a = generate_instances(2, 2, 0, 0, seed=42)
    b = generate_instances(2, 2, 0, 0, seed=42)
    assert a == b
    insts = generate_instances(3, 5, 0, 19, seed=0)
    assert len(insts) == 20
    for inst in insts:
        assert len(inst.costs) == 5 and all(len(r) == 3 for r in inst.costs)
        assert all(1 <= c <= 100 for r in inst.costs for c in r)
    # pure function of (seed, m, n, id): ranges do not matter
    assert generate_instances(3, 5, 7, 7, seed=0)[0] == insts[7]
    assert generate_instances(3, 5, 0, 0, seed=1)[0] != insts[0]


@pytest.mark.parametrize("m,n", [(3, 2), (0, 1)])
def test_generator_rejects_bad_sizes(m, n):
    with pytest.raises(ValueError):
        generate_instances(m, n)


def test_options_hardness():
    assert options_hardness({Option.HEURISTIC}) == 0
    assert options_hardness(set()) == 1
    assert options_hardness({Option.NO_CUTOFFS}) == 2
    with pytest.raises(ValueError):
        check_options({Option.HEURISTIC, Option.NO_CUTOFFS})


def test_task_list_counts():
    assert len(build_task_list(3, 2)) == 3 * (2 + 3) * 2
    for max_m, per in [(2, 1), (4, 3), (5, 2)]:
        want = 3 * sum(m for m in range(2, max_m + 1)) * per
        assert len(build_task_list(max_m, per)) == want


def test_task_list_structure():
    tasks = build_task_list(5, 2, timeout=9)
    t = next(t for t in tasks if t.hardness == (0, 5, 7))
    assert t.parameters[:2] == (5, 7) and t.parameters[3] == "{HEURISTIC}"
    assert t.parameter_titles == PARAMETER_TITLES and t.timeout == 9
    assert t.group_key == (5, 7, "{HEURISTIC}")
    assert len({t.task_id for t in tasks}) == len(tasks)
    groups = {}
    for t in tasks:
        groups.setdefault(t.group_key, []).append(t)
    assert all(len(g) == 2 for g in groups.values())
    assert GROUP_TITLES == ("n_tasks", "n_agents", "Options")


def test_payload_runs_in_worker_entry():
    inst = generate_instances(3, 4, seed=3)[0]
    t = make_task(0, inst, set())
    values, titles = run_payload(t.payload)
    assert titles == RESULT_TITLES
    assert values[0] == brute_assignment(inst.costs)
    assert values[1] == solve(inst, set()).nodes_expanded


def test_shell_workload():
    payload = json.dumps({"workload": "shell",
                          "command": ["sh", "-c", "echo noise; printf '3\\t0.5\\n'"],
                          "result_titles": ["a", "b"]})
    assert run_payload(payload) == ((3, 0.5), ("a", "b"))


def test_unknown_workload():
    with pytest.raises(ValueError):
        run_payload(json.dumps({"workload": "nope"}))
    with pytest.raises(ValueError):
        build_tasks("nope")


def test_instance_validation():
    with pytest.raises(ValueError):
        AssignmentInstance.from_costs([[1, 2]])  # 1 agent, 2 tasks
    with pytest.raises(ValueError):
        AssignmentInstance.from_costs([[0]])
    inst = AssignmentInstance.from_costs([[3, 4], [5, 6], [1, 1]], instance_id=2)
    assert AssignmentInstance.from_dict(inst.to_dict()) == inst


def test_random_instances_quick_check():
    rng = random.Random(0)
    for _ in range(30):
        m = rng.randint(1, 4)
        n = rng.randint(m, 2 * m)
        costs = [[rng.randint(1, 100) for _ in range(m)] for _ in range(n)]
        assert solve(AssignmentInstance.from_costs(costs)).optimal_cost == \
            brute_assignment(costs)
