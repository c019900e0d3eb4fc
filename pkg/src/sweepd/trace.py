"""Append-only event trace shared by nodes, used by scenario tests."""
from __future__ import annotations

import itertools
import json
import threading
import time


class Trace:
    def __init__(self, path=None):
        self._events: list[dict] = []
        self._lock = threading.Lock()
        self._counter = itertools.count()
        self._file = open(path, "a", encoding="utf-8", buffering=1) if path else None

    def record(self, node: str, event: str, **fields) -> None:
        with self._lock:
            ev = {"i": next(self._counter), "t": time.time(), "node": node,
                  "event": event, **fields}
            self._events.append(ev)
            if self._file is not None:
                self._file.write(json.dumps(ev, default=str) + "\n")

    def events(self, node: str | None = None, event: str | None = None,
               kind: str | None = None) -> list[dict]:
        with self._lock:
            evs = list(self._events)
        return [e for e in evs
                if (node is None or e["node"] == node)
                and (event is None or e["event"] == event)
                and (kind is None or e.get("kind") == kind)]

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None


class NullTrace(Trace):
    def record(self, node, event, **fields):
        pass
