"""Loopback/TCP transport: one persistent connection per direction per peer.

A :class:`Hub` owns a listening socket and an inbox. Reader threads decode
inbound lines and put ``(link, envelope)`` pairs in the inbox; the first
message on a connection (normally a HANDSHAKE) labels the link with the
peer's role and id. Outbound connections have their own writer thread so
that a slow or dead peer never blocks the node's event loop.
"""
from __future__ import annotations

import itertools
import logging
import queue
import socket
import threading
import time

from .protocol import Envelope, Kind, ProtocolError, decode, encode

log = logging.getLogger(__name__)

_link_ids = itertools.count()


class Link:
    """The receiving end of one inbound connection."""

    def __init__(self, sock: socket.socket):
        self.id = next(_link_ids)
        self.sock = sock
        self.role: str | None = None
        self.peer_id: str | None = None
        self.address: tuple | None = None
        self.alive = True

    def __repr__(self):
        return f"Link({self.id}, role={self.role}, peer={self.peer_id})"


class Outbound:
    """The sending end of one outbound connection."""

    def __init__(self, hub: "Hub", key, host: str, port: int,
                 hello: Envelope | None, connect_timeout: float):
        self.hub = hub
        self.key = key
        self.host, self.port = host, port
        self.alive = True
        self.connected = threading.Event()
        self._queue: queue.Queue = queue.Queue()
        self._sock: socket.socket | None = None
        if hello is not None:
            self._queue.put(hello)
        self._deadline = time.monotonic() + connect_timeout
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name=f"{hub.name}->{key}")
        self._thread.start()

    def send(self, env: Envelope) -> bool:
        if not self.alive:
            return False
        self._queue.put(env)
        return True

    def close(self):
        self.alive = False
        self._queue.put(None)
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass

    def _connect(self) -> socket.socket | None:
        delay = 0.02
        while self.alive and not self.hub.killed:
            try:
                return socket.create_connection((self.host, self.port), timeout=2.0)
            except OSError:
                if time.monotonic() > self._deadline:
                    return None
                time.sleep(delay)
                delay = min(delay * 2, 0.5)
        return None

    def _run(self):
        sock = self._connect()
        if sock is None:
            self.alive = False
            log.debug("%s: could not connect to %s at %s:%s",
                      self.hub.name, self.key, self.host, self.port)
            return
        sock.settimeout(None)
        self._sock = sock
        self.hub._register(sock)
        self.connected.set()
        while True:
            env = self._queue.get()
            if env is None or not self.alive:
                break
            if self.hub.killed:
                continue
            try:
                sock.sendall(encode(env))
            except OSError:
                self.alive = False
                break
        try:
            sock.close()
        except OSError:
            pass

    def flush(self, timeout: float = 2.0) -> bool:
        """Wait until everything queued so far has been written."""
        end = time.monotonic() + timeout
        while time.monotonic() < end:
            if not self.alive or (self.connected.is_set() and self._queue.empty()):
                return self.alive
            time.sleep(0.01)
        return False


class Hub:
    def __init__(self, name: str, host: str = "127.0.0.1", port: int = 0,
                 connect_timeout: float = 10.0):
        self.name = name
        self.host = host
        self.connect_timeout = connect_timeout
        self.inbox: queue.Queue = queue.Queue()
        self.killed = False
        self.closed = False
        self.out: dict = {}
        self._socks: list = []
        self._lock = threading.Lock()
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(64)
        self.port = self._listener.getsockname()[1]
        threading.Thread(target=self._accept_loop, daemon=True,
                         name=f"{name}-accept").start()

    @property
    def address(self) -> tuple:
        return (self.host, self.port)

    def _register(self, sock):
        with self._lock:
            self._socks.append(sock)

    def _accept_loop(self):
        while not self.closed:
            try:
                sock, addr = self._listener.accept()
            except OSError:
                return
            self._register(sock)
            link = Link(sock)
            link.address = addr
            threading.Thread(target=self._read_loop, args=(link,), daemon=True,
                             name=f"{self.name}-read-{link.id}").start()

    def _read_loop(self, link: Link):
        try:
            stream = link.sock.makefile("rb")
            for line in stream:
                if self.killed:
                    continue  # a dead node swallows input silently
                try:
                    env = decode(line)
                except ProtocolError as exc:
                    log.warning("%s: dropping malformed line from %s: %s",
                                self.name, link.peer_id, exc)
                    continue
                if link.role is None:
                    if env.kind is Kind.HANDSHAKE:
                        link.role = env.body["kind"]
                        link.peer_id = env.sender_id
                    else:
                        link.role = "control"
                        link.peer_id = env.sender_id
                self.inbox.put((link, env))
        except (OSError, ValueError):
            pass
        finally:
            link.alive = False

    def get(self, timeout: float | None = None):
        try:
            return self.inbox.get(timeout=timeout)
        except queue.Empty:
            return None

    def drain(self) -> list:
        items = []
        while True:
            try:
                items.append(self.inbox.get_nowait())
            except queue.Empty:
                return items

    def connect(self, key, host: str, port: int, hello: Envelope | None = None,
                connect_timeout: float | None = None) -> Outbound:
        old = self.out.pop(key, None)
        if old is not None:
            old.close()
        ob = Outbound(self, key, host, port, hello,
                      self.connect_timeout if connect_timeout is None else connect_timeout)
        self.out[key] = ob
        return ob

    def send(self, key, env: Envelope) -> bool:
        if self.killed:
            return False
        ob = self.out.get(key)
        if ob is None:
            return False
        return ob.send(env)

    def rekey(self, old_key, new_key):
        ob = self.out.pop(old_key, None)
        if ob is not None:
            ob.key = new_key
            prev = self.out.pop(new_key, None)
            self.out[new_key] = ob
            if prev is not None:
                self.out[old_key] = prev
                prev.key = old_key

    def drop(self, key):
        ob = self.out.pop(key, None)
        if ob is not None:
            ob.close()

    def send_once(self, host: str, port: int, env: Envelope,
                  timeout: float = 2.0) -> bool:
        """Open a temporary connection, send one message and close it."""
        if self.killed:
            return False
        try:
            with socket.create_connection((host, port), timeout=timeout) as s:
                s.sendall(encode(env))
            return True
        except OSError:
            return False

    def kill(self):
        """Stop sending and processing, but keep sockets open: models an
        instance that silently stops responding."""
        self.killed = True

    def close(self):
        self.closed = True
        self.killed = True
        for ob in list(self.out.values()):
            ob.close()
        # shutdown wakes a thread blocked in accept(); close alone does not
        for op in (lambda: self._listener.shutdown(socket.SHUT_RDWR), self._listener.close):
            try:
                op()
            except OSError:
                pass
        with self._lock:
            socks, self._socks = self._socks, []
        for s in socks:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                s.close()
            except OSError:
                pass
