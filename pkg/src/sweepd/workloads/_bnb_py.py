"""Pure-Python depth-first branch and bound for agent assignment.

``costs[i][j]`` is the time agent ``i`` needs for task ``j``. Tasks are
assigned in index order; agents are tried in index order.
"""

MODE_NO_CUTOFFS = 0
MODE_BNB = 1
MODE_HEURISTIC = 2


def remaining_bound(costs, used, first_task):
    n = len(costs)
    m = len(costs[0]) if n else 0
    total = 0
    for j in range(first_task, m):
        best = None
        for i in range(n):
            if not used[i] and (best is None or costs[i][j] < best):
                best = costs[i][j]
        total += best
    return total


def solve_kernel(costs, mode):
    """Return ``(optimal_cost, assignment, nodes_expanded)``.

    ``assignment[j]`` is the agent given task ``j``. A node is counted when
    it is entered; the root counts as one. With cutoffs, a child whose
    (bounded) cost reaches the incumbent is discarded without being entered.
    """
    n = len(costs)
    m = len(costs[0])
    used = [False] * n
    current = [0] * m
    best = [None, None]  # cost, assignment
    nodes = 1
    heuristic = mode == MODE_HEURISTIC
    cutoffs = mode != MODE_NO_CUTOFFS

    def visit(j, g):
        nonlocal nodes
        if j == m:
            if best[0] is None or g < best[0]:
                best[0] = g
                best[1] = list(current)
            return
        for i in range(n):
            if used[i]:
                continue
            child = g + costs[i][j]
            if cutoffs and best[0] is not None:
                bound = child
                if heuristic:
                    used[i] = True
                    bound += remaining_bound(costs, used, j + 1)
                    used[i] = False
                if bound >= best[0]:
                    continue
            used[i] = True
            current[j] = i
            nodes += 1
            visit(j + 1, child)
            used[i] = False

    visit(0, 0)
    return best[0], best[1], nodes
