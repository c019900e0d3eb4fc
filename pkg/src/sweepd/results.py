"""Result tables: group filtering, the TSV results file and its viewer."""
from __future__ import annotations

import json
import os
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .task import Status, TaskDescriptor, TaskStatus, restore_original_order

RESULTS_FILE = "results.tsv"
META_FILE = "results.meta.json"


@dataclass
class ResultTable:
    parameter_titles: tuple
    result_titles: tuple
    rows: list = field(default_factory=list)
    group_titles: tuple = ()

    def __post_init__(self):
        self.parameter_titles = tuple(self.parameter_titles)
        self.result_titles = tuple(self.result_titles)
        self.group_titles = tuple(self.group_titles)
        self.rows = [tuple(r) for r in self.rows]

    @property
    def titles(self) -> tuple:
        return self.parameter_titles + self.result_titles

    def column(self, title: str) -> list:
        i = self.titles.index(title)
        return [r[i] for r in self.rows]


def finalize(tasks: Iterable[TaskDescriptor], status: Mapping[int, TaskStatus],
             results: Mapping[int, Sequence], result_titles: Sequence[str],
             min_group_size: int = 0, group_titles: Sequence[str] = ()) -> ResultTable:
    """Rows of Done tasks whose group has at least ``min_group_size`` Done
    tasks, in the original task order."""
    tasks = restore_original_order(tasks)
    done = [t for t in tasks if status[t.task_id].state is Status.DONE]
    per_group: dict = defaultdict(int)
    for t in done:
        per_group[t.group_key] += 1
    kept = [t for t in done if per_group[t.group_key] >= min_group_size]
    param_titles = tasks[0].parameter_titles if tasks else ()
    rows = [tuple(t.parameters) + tuple(results[t.task_id]) for t in kept]
    return ResultTable(param_titles, tuple(result_titles), rows, tuple(group_titles))


def _cell(value) -> str:
    text = repr(value) if isinstance(value, float) else str(value)
    if "\t" in text or "\n" in text:
        raise ValueError(f"cell contains a tab or newline: {text!r}")
    return text


def parse_cell(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def write_results(table: ResultTable, output_dir: str | os.PathLike) -> Path:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / RESULTS_FILE
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write("\t".join(table.titles) + "\n")
        for row in table.rows:
            f.write("\t".join(_cell(v) for v in row) + "\n")
    meta = {"parameter_titles": list(table.parameter_titles),
            "result_titles": list(table.result_titles),
            "group_titles": list(table.group_titles)}
    (out / META_FILE).write_text(json.dumps(meta, indent=2), encoding="utf-8")
    os.replace(tmp, path)
    return path


def read_results(output_dir: str | os.PathLike) -> ResultTable:
    out = Path(output_dir)
    lines = (out / RESULTS_FILE).read_text(encoding="utf-8").splitlines()
    titles = tuple(lines[0].split("\t")) if lines else ()
    rows = [tuple(parse_cell(c) for c in ln.split("\t")) for ln in lines[1:] if ln]
    meta_path = out / META_FILE
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        params, res = tuple(meta["parameter_titles"]), tuple(meta["result_titles"])
        groups = tuple(meta.get("group_titles", ()))
    else:
        params, res, groups = titles, (), ()
    if params + res != titles:
        raise ValueError("results header does not match its metadata")
    return ResultTable(params, res, rows, groups)


def filter_rows(table: ResultTable, where: Mapping[str, str]) -> ResultTable:
    idx = {t: i for i, t in enumerate(table.titles)}
    for title in where:
        if title not in idx:
            raise KeyError(f"no column {title!r}")
    rows = [r for r in table.rows
            if all(_cell(r[idx[t]]) == str(v) for t, v in where.items())]
    return ResultTable(table.parameter_titles, table.result_titles, rows,
                       table.group_titles)


def aggregate(table: ResultTable) -> ResultTable:
    """One row per group: the group columns, the row count and the mean of
    every numeric result column."""
    group_titles = table.group_titles or tuple(
        t for t in table.parameter_titles if t != "id")
    gi = [table.titles.index(t) for t in group_titles]
    ri = [table.titles.index(t) for t in table.result_titles]
    groups: dict = {}
    for row in table.rows:
        groups.setdefault(tuple(row[i] for i in gi), []).append(row)
    out_rows = []
    for key, rows in groups.items():
        means = []
        for i in ri:
            vals = [r[i] for r in rows]
            if all(isinstance(v, (int, float)) for v in vals):
                means.append(statistics.fmean(vals))
            else:
                means.append("")
        out_rows.append(key + (len(rows),) + tuple(means))
    return ResultTable(group_titles + ("count",), table.result_titles, out_rows,
                       group_titles)


def format_table(table: ResultTable) -> str:
    def fmt(v):
        return f"{v:.6g}" if isinstance(v, float) else str(v)

    cells = [list(table.titles)] + [[fmt(v) for v in r] for r in table.rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(table.titles))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
                     for row in cells)
