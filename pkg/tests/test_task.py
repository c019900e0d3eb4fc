import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sweepd.task import (InvariantViolation, MinAntichain, Status, TaskDescriptor,
                         TaskStatus, antichain_insert, dominates, is_linear_extension,
                         is_pruned, order_tasks, restore_original_order)

from helpers import brute_minimal, geq

tuples3 = st.tuples(*[st.integers(0, 9)] * 3)


def task(i, hardness, index=None, group_titles=("a",)):
    return TaskDescriptor.build(i, parameters=(i % 2, i), parameter_titles=("a", "id"),
                                hardness=hardness, group_titles=group_titles,
                                original_index=i if index is None else index)


class TestDominates:
    @pytest.mark.parametrize("a,b,expected", [
        ((0, 10, 12), (0, 9, 12), True),
        ((1, 5, 5), (1, 5, 5), True),
        ((0, 10, 12), (1, 2, 2), False),
    ])
    def test_examples(self, a, b, expected):
        assert dominates(a, b) is expected

    def test_length_mismatch(self):
        with pytest.raises(InvariantViolation):
            dominates((1, 2), (1, 2, 3))

    @given(tuples3)
    def test_reflexive(self, a):
        assert dominates(a, a)

    @given(tuples3, tuples3)
    def test_antisymmetric(self, a, b):
        if dominates(a, b) and dominates(b, a):
            assert a == b

    @given(tuples3, tuples3, tuples3)
    def test_transitive(self, a, b, c):
        if dominates(a, b) and dominates(b, c):
            assert dominates(a, c)

    @given(tuples3, tuples3)
    def test_matches_componentwise_oracle(self, a, b):
        assert dominates(a, b) == geq(a, b)


class TestAntichain:
    def test_incomparable_pair(self):
        ac = MinAntichain([(1, 2)])
        assert antichain_insert(ac, (2, 1)).elements == {(1, 2), (2, 1)}

    def test_smaller_element_replaces_both(self):
        ac = MinAntichain([(1, 2), (2, 1)])
        assert antichain_insert(ac, (1, 1)).elements == {(1, 1)}

    def test_dominated_element_not_stored(self):
        ac = MinAntichain([(1, 1)])
        assert not ac.insert((3, 3))
        assert ac.elements == {(1, 1)}

    def test_insert_is_idempotent(self):
        ac = MinAntichain([(1, 2), (3, 0)])
        before = ac.elements
        assert not ac.insert((1, 2))
        assert ac.elements == before

    def test_antichain_insert_does_not_mutate(self):
        ac = MinAntichain([(1, 2)])
        antichain_insert(ac, (0, 0))
        assert ac.elements == {(1, 2)}

    def test_length_mismatch(self):
        with pytest.raises(InvariantViolation):
            MinAntichain([(1, 2)]).insert((1, 2, 3))

    @pytest.mark.parametrize("elements,h,expected", [
        ([(1, 5, 5)], (1, 5, 6), True),
        ([(1, 5, 5)], (0, 50, 50), False),
        ([], (3, 3, 3), False),
    ])
    def test_is_pruned_examples(self, elements, h, expected):
        assert is_pruned(MinAntichain(elements), h) is expected

    @settings(max_examples=300)
    @given(st.lists(tuples3, max_size=30))
    def test_equals_brute_force_minimal_elements(self, seq):
        ac = MinAntichain()
        for h in seq:
            ac.insert(h)
        assert ac.elements == brute_minimal(seq)

    @settings(max_examples=300)
    @given(st.lists(tuples3, max_size=30), tuples3)
    def test_reduction_keeps_pruned_set(self, seq, h):
        ac = MinAntichain(seq)
        assert ac.prunes(h) == any(geq(h, s) for s in seq)

    @given(st.lists(tuples3, max_size=30))
    def test_pairwise_incomparable(self, seq):
        els = list(MinAntichain(seq).elements)
        for a, b in itertools.permutations(els, 2):
            assert not dominates(a, b)


class TestOrdering:
    def test_chain(self):
        ts = [task(0, (2, 2)), task(1, (1, 1)), task(2, (1, 2))]
        assert [t.hardness for t in order_tasks(ts)] == [(1, 1), (1, 2), (2, 2)]

    def test_incomparable_lexicographic(self):
        ts = [task(0, (2, 1)), task(1, (1, 2))]
        out = order_tasks(ts)
        assert [t.hardness for t in out] == [(1, 2), (2, 1)]
        assert is_linear_extension([t.hardness for t in out])

    def test_sorted_input_unchanged(self):
        ts = [task(0, (0, 1)), task(1, (0, 2)), task(2, (1, 1))]
        assert order_tasks(ts) == ts

    def test_ties_broken_by_original_index(self):
        ts = [task(0, (1, 1), index=5), task(1, (1, 1), index=2)]
        assert [t.original_index for t in order_tasks(ts)] == [2, 5]

    def test_mixed_lengths_rejected(self):
        with pytest.raises(InvariantViolation):
            order_tasks([task(0, (1, 1)), task(1, (1, 1, 1))])

    @settings(max_examples=100)
    @given(st.lists(tuples3, min_size=1, max_size=100))
    def test_output_is_linear_extension(self, hs):
        out = order_tasks([task(i, h) for i, h in enumerate(hs)])
        # brute force over all pairs, independent of is_linear_extension
        for i in range(len(out)):
            for j in range(i + 1, len(out)):
                a, b = out[i].hardness, out[j].hardness
                assert not (a != b and geq(a, b))

    def test_restore_examples(self):
        ts = [task(0, (0,), index=2), task(1, (1,), index=0), task(2, (2,), index=1)]
        assert [t.original_index for t in restore_original_order(ts)] == [0, 1, 2]
        assert restore_original_order(ts[:1]) == ts[:1]

    def test_restore_duplicate_index(self):
        with pytest.raises(InvariantViolation):
            restore_original_order([task(0, (0,), index=1), task(1, (1,), index=1)])

    @given(st.lists(tuples3, max_size=60))
    def test_restore_inverts_ordering(self, hs):
        ts = [task(i, h) for i, h in enumerate(hs)]
        random.Random(len(hs)).shuffle(ts)
        original = sorted(ts, key=lambda t: t.original_index)
        assert restore_original_order(order_tasks(ts)) == original

    def test_is_linear_extension_detects_violation(self):
        assert not is_linear_extension([(2, 2), (1, 1)])
        assert is_linear_extension([(1, 2), (2, 1), (2, 2)])


class TestDescriptor:
    def test_group_key_is_projection(self):
        t = TaskDescriptor.build(3, parameters=(4, 7, 1, "{}"),
                                 parameter_titles=("n_tasks", "n_agents", "id", "Options"),
                                 hardness=(1, 4, 7),
                                 group_titles=("n_tasks", "n_agents", "Options"))
        assert t.group_key == (4, 7, "{}")

    def test_round_trip(self):
        t = task(4, (1, 2, 3))
        assert TaskDescriptor.from_dict(t.to_dict()) == t

    @pytest.mark.parametrize("bad", [dict(timeout=0), dict(hardness=())])
    def test_validation(self, bad):
        kw = dict(parameters=(1,), parameter_titles=("a",), hardness=(1,),
                  group_titles=("a",))
        kw.update(bad)
        with pytest.raises(ValueError):
            TaskDescriptor.build(0, **kw)


class TestStatus:
    legal = {
        Status.PENDING: {Status.ASSIGNED, Status.SKIPPED},
        Status.ASSIGNED: {Status.DONE, Status.TIMED_OUT, Status.REASSIGNABLE,
                          Status.SKIPPED},
        Status.REASSIGNABLE: {Status.ASSIGNED, Status.SKIPPED},
        Status.DONE: set(), Status.TIMED_OUT: set(), Status.SKIPPED: set(),
    }

    @pytest.mark.parametrize("src,dst", list(itertools.product(Status, Status)))
    def test_transition_table(self, src, dst):
        st_ = TaskStatus(src, "c" if src is Status.ASSIGNED else None)
        client = "c" if dst is Status.ASSIGNED else None
        if dst in self.legal[src]:
            assert st_.to(dst, client).state is dst
        else:
            with pytest.raises(InvariantViolation):
                st_.to(dst, client)

    def test_terminal(self):
        assert {s for s in Status if TaskStatus(s).terminal} == {
            Status.DONE, Status.TIMED_OUT, Status.SKIPPED}
