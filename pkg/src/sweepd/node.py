"""Common machinery for servers and clients: tracing and fault hooks."""
from __future__ import annotations

import logging
import threading
import time

from .net import Hub
from .protocol import Envelope
from .trace import NullTrace, Trace

log = logging.getLogger(__name__)


class InstanceKilled(BaseException):
    """Unwinds a node's event loop when a fault trigger fires."""


class Node:
    role = "node"
    tick = 0.01

    def __init__(self, name: str, hub: Hub, trace: Trace | None = None, faults=None):
        self.name = name
        self.hub = hub
        self.trace = trace if trace is not None else NullTrace()
        self.faults = faults
        self.killed = False
        self.started = time.monotonic()
        self.on_death = None
        self._stop = threading.Event()

    # fault hooks ---------------------------------------------------------

    def _observe(self, direction: str, env: Envelope, origin: str | None = None):
        if self.faults and self.faults.observe(self.name, self.role, direction,
                                               env.kind.value, origin):
            self._die(f"after {direction} {env.kind.value}")

    def _check_due(self):
        if self.killed:
            raise InstanceKilled()
        if self.faults and self.faults.due(self.name, self.role,
                                           time.monotonic() - self.started):
            self._die("scheduled")

    def _die(self, why: str):
        self.trace.record(self.name, "fault_kill", role=self.role, why=why)
        log.info("%s: fault injected (%s)", self.name, why)
        self.kill()
        if self.on_death is not None:
            self.on_death()
        raise InstanceKilled()

    # lifecycle -----------------------------------------------------------

    def kill(self):
        """Silent stop: no further sends, inbound swallowed."""
        self.killed = True
        self.hub.kill()
        self._stop.set()

    def stop(self):
        self._stop.set()

    def close(self):
        self.hub.close()

    def _collect(self, timeout: float) -> list:
        first = self.hub.get(timeout=timeout)
        if first is None:
            return []
        return [first] + self.hub.drain()

    def _send(self, key, env: Envelope) -> bool:
        ok = self.hub.send(key, env)
        self.trace.record(self.name, "send", role=self.role, to=str(key),
                          kind=env.kind.value, seq=env.seq, sender=env.sender_id,
                          body=env.summary(), ok=ok)
        self._observe("sent", env, origin=str(key))
        return ok

    def _record_recv(self, env: Envelope, origin: str | None, via: str | None = None):
        self.trace.record(self.name, "recv", role=self.role, origin=origin, via=via,
                          kind=env.kind.value, seq=env.seq, sender=env.sender_id,
                          body=env.summary())
