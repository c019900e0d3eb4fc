# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled branch and bound kernel; mirrors ``_bnb_py.solve_kernel``."""

from libc.stdlib cimport malloc, free

cdef enum:
    NO_INCUMBENT = -1


cdef struct Search:
    int n
    int m
    int mode
    long *costs       # row-major n x m
    char *used
    int *current
    int *best_assign
    long best
    long long nodes


cdef long remaining_bound(Search *s, int first_task) nogil:
    cdef long total = 0
    cdef long c, lo
    cdef int i, j
    for j in range(first_task, s.m):
        lo = -1
        for i in range(s.n):
            if not s.used[i]:
                c = s.costs[i * s.m + j]
                if lo < 0 or c < lo:
                    lo = c
        total += lo
    return total


cdef void visit(Search *s, int j, long g) nogil:
    cdef int i, k
    cdef long child, bound
    if j == s.m:
        if s.best == NO_INCUMBENT or g < s.best:
            s.best = g
            for k in range(s.m):
                s.best_assign[k] = s.current[k]
        return
    for i in range(s.n):
        if s.used[i]:
            continue
        child = g + s.costs[i * s.m + j]
        if s.mode != 0 and s.best != NO_INCUMBENT:
            bound = child
            if s.mode == 2:
                s.used[i] = 1
                bound += remaining_bound(s, j + 1)
                s.used[i] = 0
            if bound >= s.best:
                continue
        s.used[i] = 1
        s.current[j] = i
        s.nodes += 1
        visit(s, j + 1, child)
        s.used[i] = 0


def solve_kernel(costs, int mode):
    cdef Search s
    cdef int i, j
    s.n = len(costs)
    s.m = len(costs[0])
    s.mode = mode
    s.best = NO_INCUMBENT
    s.nodes = 1
    s.costs = <long *> malloc(s.n * s.m * sizeof(long))
    s.used = <char *> malloc(s.n * sizeof(char))
    s.current = <int *> malloc(s.m * sizeof(int))
    s.best_assign = <int *> malloc(s.m * sizeof(int))
    if not s.costs or not s.used or not s.current or not s.best_assign:
        free(s.costs); free(s.used); free(s.current); free(s.best_assign)
        raise MemoryError()
    try:
        for i in range(s.n):
            s.used[i] = 0
            row = costs[i]
            for j in range(s.m):
                s.costs[i * s.m + j] = row[j]
        with nogil:
            visit(&s, 0, 0)
        return s.best, [s.best_assign[j] for j in range(s.m)], s.nodes
    finally:
        free(s.costs); free(s.used); free(s.current); free(s.best_assign)


def remaining_bound_py(costs, used, int first_task):
    """Exposed for tests; same contract as ``_bnb_py.remaining_bound``."""
    cdef Search s
    cdef int i, j
    s.n = len(costs)
    s.m = len(costs[0])
    s.costs = <long *> malloc(s.n * s.m * sizeof(long))
    s.used = <char *> malloc(s.n * sizeof(char))
    try:
        for i in range(s.n):
            s.used[i] = 1 if used[i] else 0
            for j in range(s.m):
                s.costs[i * s.m + j] = costs[i][j]
        return remaining_bound(&s, first_task)
    finally:
        free(s.costs); free(s.used)
