"""Workloads runnable inside worker processes.

A task payload is a JSON object naming its workload. ``inject`` adds
test-only behaviour (delay before running, crash without result).
"""
from __future__ import annotations

import json
import os
import shlex
import subprocess
import time

from . import assignment


def _run_shell(payload: dict) -> tuple:
    cmd = payload["command"]
    if isinstance(cmd, str):
        cmd = shlex.split(cmd)
    out = subprocess.run(cmd, check=True, capture_output=True, text=True).stdout
    lines = [ln for ln in out.splitlines() if ln.strip()]
    return tuple(_parse_cell(v) for v in lines[-1].split("\t")) if lines else ()


def _parse_cell(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


WORKLOADS = {
    "assignment": (assignment.run, assignment.RESULT_TITLES),
    "shell": (_run_shell, None),
}


def run_payload(payload_text: str) -> tuple[tuple, tuple]:
    """Run one task payload; return ``(result_values, result_titles)``."""
    payload = json.loads(payload_text)
    inject = payload.get("inject") or {}
    if inject.get("delay"):
        time.sleep(float(inject["delay"]))
    if inject.get("crash"):
        os._exit(int(inject.get("exit_code", 3)))
    name = payload["workload"]
    try:
        fn, titles = WORKLOADS[name]
    except KeyError:
        raise ValueError(f"unknown workload {name!r}") from None
    values = fn(payload)
    if titles is None:
        titles = tuple(payload.get("result_titles") or
                       (f"value_{i}" for i in range(len(values))))
    return tuple(values), tuple(titles)


def build_tasks(name: str, **params):
    if name != "assignment":
        raise ValueError(f"no task-list builder for workload {name!r}")
    return assignment.build_task_list(**params), assignment.RESULT_TITLES
