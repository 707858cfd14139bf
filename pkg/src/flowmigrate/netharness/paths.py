"""Simulated network paths over loopback.

Each path binds its outgoing sockets to its own loopback source address, so
a server can tell which path carried a connection. Taking a path down
severs every connection on it and refuses new ones.

Under a virtual clock, bytes received on a path advance the clock at the
path's nominal rate, and a single ``recv`` never crosses the next scheduled
event. That makes outage positions reproducible to the byte.
"""

from __future__ import annotations

import ipaddress
import logging
import socket
import struct
import threading
from typing import Callable, Mapping

from ..flow_manager import NetworkPath, PathKind, PathState, PathUnavailable
from .clock import NS

log = logging.getLogger(__name__)

DEFAULT_RATE = 1 << 20  # bytes per virtual second

_source_registry: dict[str, str] = {}
_registry_lock = threading.Lock()


def path_for_source(ip: str) -> str | None:
    with _registry_lock:
        return _source_registry.get(ip)


class PathConnection:
    """Socket-like wrapper for one connection opened on a :class:`SimulatedPath`."""

    def __init__(self, path: "SimulatedPath", raw: socket.socket, sock, dst_port: int, destination: str):
        self.path = path
        # wrap_socket detaches the plain socket, so a TLS connection is its own raw socket
        self.raw = sock if isinstance(sock, socket.socket) else raw
        self.sock = sock
        self.dst_port = dst_port
        self.destination = destination
        self.flow_id: str | None = None
        self.severed = False
        self.cut_by_path = False
        self.closed = False
        self.received = 0

    # socket-ish surface

    def fileno(self) -> int:
        return self.raw.fileno()

    def settimeout(self, value) -> None:
        self.sock.settimeout(value)

    def gettimeout(self):
        return self.sock.gettimeout()

    def pending(self) -> int:
        pending = getattr(self.sock, "pending", None)
        return pending() if pending else 0

    def getpeername(self):
        return self.raw.getpeername()

    def getsockname(self):
        return self.raw.getsockname()

    def _check(self) -> None:
        if self.severed:
            raise ConnectionResetError(f"connection severed on path {self.path.path_id}")
        if self.closed:
            raise OSError("connection closed")

    def recv(self, n: int) -> bytes:
        self._check()
        n = self.path.byte_budget(n)
        try:
            data = self.sock.recv(n)
        except OSError:
            if self.severed:
                raise ConnectionResetError(f"connection severed on path {self.path.path_id}") from None
            raise
        if self.severed:
            raise ConnectionResetError(f"connection severed on path {self.path.path_id}")
        if data:
            self.received += len(data)
            self.path.account(self, len(data))
        return data

    def sendall(self, data) -> None:
        self._check()
        try:
            self.sock.sendall(data)
        except OSError:
            if self.severed:
                raise BrokenPipeError(f"connection severed on path {self.path.path_id}") from None
            raise

    send = sendall

    def sever(self, by_path: bool = False) -> None:
        """Abortive cut: RST on close, readers see an error."""
        if self.severed or self.closed:
            return
        self.severed = True
        self.cut_by_path = by_path
        try:
            self.raw.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
            self.raw.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.path.forget(self)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            if self.severed:
                self.raw.close()
            else:
                self.sock.close()
        except OSError:
            pass
        self.path.forget(self)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class SimulatedPath(NetworkPath):
    def __init__(
        self,
        path_id: str,
        kind: PathKind | str,
        source_ip: str,
        clock,
        rate: float = DEFAULT_RATE,
        latency_s: float = 0.0,
        resolver: Mapping[str, str] | None = None,
    ):
        super().__init__(path_id, kind)
        self.source_ip = source_ip
        self.clock = clock
        self.rate = int(rate)
        if self.rate <= 0:
            raise ValueError("rate must be a positive number of bytes per second")
        self.latency_s = latency_s
        self.resolver = dict(resolver or {})
        self._conns: set[PathConnection] = set()
        self._lock = threading.Lock()
        self.opened = 0
        self.refused = 0
        self.bytes_received = 0
        self._charged = 0  # bytes already converted to virtual time
        self._acct = threading.Lock()
        with _registry_lock:
            _source_registry[source_ip] = path_id

    def resolve(self, host: str) -> str:
        if host in self.resolver:
            return self.resolver[host]
        try:
            ipaddress.ip_address(host)
            return host
        except ValueError:
            return socket.gethostbyname(host)

    def open_connection(
        self,
        address,
        timeout: float | None = 10.0,
        wrap: Callable[[socket.socket], object] | None = None,
        app: str = "",
        interactive: bool = False,
    ) -> PathConnection:
        host, port = address
        if not self.up:
            self.refused += 1
            raise PathUnavailable(f"path {self.path_id} is {self.state.value}")
        if self.latency_s:
            self.clock.sleep(self.latency_s)
            if not self.up:
                self.refused += 1
                raise PathUnavailable(f"path {self.path_id} went {self.state.value}")
        raw = socket.create_connection((self.resolve(host), port), timeout=timeout, source_address=(self.source_ip, 0))
        raw.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            sock = wrap(raw) if wrap is not None else raw
        except Exception:
            raw.close()
            raise
        conn = PathConnection(self, raw, sock, dst_port=port, destination=host)
        with self._lock:
            self._conns.add(conn)
            self.opened += 1
        if self.manager is not None:
            conn.flow_id = self.manager.register_flow(
                self.path_id, port, destination=host, app=app, interactive=interactive,
                sever=conn.sever,
            )
        return conn

    def _ns_for(self, total_bytes: int) -> int:
        return total_bytes * NS // self.rate

    def byte_budget(self, n: int) -> int:
        """Largest read that does not carry the clock past its next event."""
        if not getattr(self.clock, "virtual", False):
            return n
        with self.clock._lock:
            nxt = self.clock.next_event_ns()
            if nxt is None:
                return n
            gap = max(0, nxt - self.clock.now_ns())
            with self._acct:
                base = self._charged
            target = self._ns_for(base) + gap
            need = -(-(target * self.rate) // NS) - base
            return max(1, min(n, need))

    def account(self, conn: PathConnection, n: int) -> None:
        # charge by cumulative bytes so the clock does not depend on how reads were split
        with self._acct:
            before = self._charged
            self._charged += n
            self.bytes_received += n
            dt = self._ns_for(self._charged) - self._ns_for(before)
        if self.manager is not None and conn.flow_id is not None:
            self.manager.flow_bytes(conn.flow_id, n)
        if getattr(self.clock, "virtual", False):
            self.clock.advance_ns(dt)

    def forget(self, conn: PathConnection) -> None:
        with self._lock:
            known = conn in self._conns
            self._conns.discard(conn)
        if known and self.manager is not None and conn.flow_id is not None:
            self.manager.flow_closed(conn.flow_id, disrupted=conn.cut_by_path)

    def connections(self) -> list[PathConnection]:
        with self._lock:
            return list(self._conns)

    def apply_state(self, state: PathState) -> None:
        if state != PathState.UP:
            for conn in self.connections():
                conn.sever(by_path=True)

    def down(self) -> None:
        self.set_state(PathState.DOWN)

    def restore(self) -> None:
        self.set_state(PathState.UP)
