import statistics

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sweepd.results import (ResultTable, aggregate, filter_rows, finalize,
                            format_table, read_results, write_results)
from sweepd.task import Status, TaskDescriptor, TaskStatus

TITLES = ("n", "id", "opt")


def make_tasks(groups, per_group):
    tasks = []
    for g in range(groups):
        for i in range(per_group):
            tid = len(tasks)
            tasks.append(TaskDescriptor.build(tid, parameters=(g, i, "x"),
                                              parameter_titles=TITLES, hardness=(g,),
                                              group_titles=("n", "opt")))
    return tasks


def statuses(tasks, done):
    return {t.task_id: TaskStatus(Status.DONE if t.task_id in done else Status.SKIPPED)
            for t in tasks}


class TestFinalize:
    def test_group_filter(self):
        tasks = make_tasks(2, 20)
        done = set(range(18)) | {20, 21, 22}  # 18 in group 0, 3 in group 1
        results = {tid: (tid, 0.5) for tid in done}
        kept = finalize(tasks, statuses(tasks, done), results, ("r", "s"), 18)
        assert [r[0] for r in kept.rows] == [0] * 18
        assert len(finalize(tasks, statuses(tasks, done), results, ("r", "s"), 0).rows) == 21

    def test_original_order_and_columns(self):
        tasks = make_tasks(1, 3)
        shuffled = [tasks[2], tasks[0], tasks[1]]
        results = {0: (10,), 1: (11,), 2: (12,)}
        table = finalize(shuffled, statuses(tasks, {0, 1, 2}), results, ("r",))
        assert table.titles == TITLES + ("r",)
        assert [r[-1] for r in table.rows] == [10, 11, 12]

    @given(st.lists(st.booleans(), min_size=12, max_size=12), st.integers(0, 5))
    def test_filter_oracle(self, flags, k):
        tasks = make_tasks(3, 4)
        done = {i for i, f in enumerate(flags) if f}
        results = {tid: (tid,) for tid in done}
        table = finalize(tasks, statuses(tasks, done), results, ("r",), k)
        per = {g: sum(1 for t in tasks if t.parameters[0] == g and t.task_id in done)
               for g in range(3)}
        want = [t.task_id for t in tasks if t.task_id in done and per[t.parameters[0]] >= k]
        assert [r[-1] for r in table.rows] == want


class TestFile:
    def test_round_trip(self, tmp_path):
        t = ResultTable(("a", "Options"), ("cost", "sec"),
                        [(1, "{}", 5, 0.031), (2, "{HEURISTIC}", 7, 1e-05)], ("Options",))
        write_results(t, tmp_path)
        assert read_results(tmp_path) == t
        lines = (tmp_path / "results.tsv").read_text().splitlines()
        assert lines[0] == "a\tOptions\tcost\tsec"
        assert lines[1] == "1\t{}\t5\t0.031"

    @given(st.lists(st.tuples(st.integers(-10**6, 10**6),
                              st.floats(allow_nan=False, allow_infinity=False),
                              st.text(st.characters(blacklist_categories=("Cs", "Cc")),
                                      min_size=1, max_size=8)
                              .filter(lambda s: s.strip() == s and not _numeric(s))),
                    max_size=10))
    def test_round_trip_property(self, rows):
        import tempfile
        with tempfile.TemporaryDirectory() as d:
            t = ResultTable(("i",), ("f", "s"), rows)
            write_results(t, d)
            assert read_results(d) == t

    def test_tab_in_cell_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_results(ResultTable(("a",), (), [("x\ty",)]), tmp_path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            read_results(tmp_path)


def _numeric(s):
    for cast in (int, float):
        try:
            cast(s)
            return True
        except ValueError:
            pass
    return False


class TestViewer:
    table = ResultTable(("n", "id", "Options"), ("cost", "sec"),
                        [(2, 0, "{}", 4, 0.5), (2, 1, "{}", 6, 1.5),
                         (2, 0, "{HEURISTIC}", 4, 0.25), (2, 1, "{HEURISTIC}", 6, 0.75)],
                        ("n", "Options"))

    def test_filter(self):
        out = filter_rows(self.table, {"Options": "{HEURISTIC}"})
        assert [r[2] for r in out.rows] == ["{HEURISTIC}"] * 2
        assert filter_rows(self.table, {"n": "2", "id": "1"}).rows == \
            [self.table.rows[1], self.table.rows[3]]
        with pytest.raises(KeyError):
            filter_rows(self.table, {"nope": "1"})

    def test_aggregate_means(self):
        out = aggregate(self.table)
        assert out.titles == ("n", "Options", "count", "cost", "sec")
        for row in out.rows:
            members = [r for r in self.table.rows if (r[0], r[2]) == row[:2]]
            assert row[2] == len(members) == 2
            assert row[3] == statistics.mean(r[3] for r in members)
            assert row[4] == pytest.approx(statistics.mean(r[4] for r in members))

    def test_format_aligned(self):
        lines = format_table(self.table).splitlines()
        assert len(lines) == 1 + len(self.table.rows)
        header = lines[0]
        starts = [header.index(t) for t in self.table.titles]
        for ln in lines[1:]:
            for pos in starts[1:]:
                # every cell begins right after a column gap
                assert ln[pos - 1] == " " and ln[pos] != " "
