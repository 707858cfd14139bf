"""Mock origin servers with controllable resume semantics."""

from __future__ import annotations

import hashlib
import logging
import random
import re
import socket
import ssl
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

from .paths import path_for_source

log = logging.getLogger(__name__)

_RANGE = re.compile(r"^bytes=(\d+)-(\d*)$")
SEND_PIECE = 16 * 1024


class Behavior(str, Enum):
    STATIC_RANGE = "static_range"
    STATIC_NO_RANGE = "static_no_range"
    CHUNKED = "chunked"
    DYNAMIC_JITTER = "dynamic_jitter"
    NO_CACHE_STATIC = "no_cache_static"
    POST_ECHO = "post_echo"


@lru_cache(maxsize=64)
def make_body(seed: int, length: int) -> bytes:
    """Deterministic pseudo-random content."""
    return random.Random(seed).randbytes(length)


@dataclass(frozen=True)
class OriginProfile:
    """What an origin serves and how it treats Range requests.

    For ``DYNAMIC_JITTER`` the bytes in ``offset_region`` ``(start, span)``
    are replaced per request by a fresh block whose length varies by up to
    ``length_jitter_fraction * body_length``; ``region_lengths`` pins the
    block length of the n-th request instead. Everything outside the region
    is identical across requests.
    """

    behavior: Behavior = Behavior.STATIC_RANGE
    body_seed: int = 1
    body_length: int = 1 << 20
    length_jitter_fraction: float = 0.0
    offset_region: tuple[int, int] = (1024, 2048)
    region_lengths: tuple[int, ...] | None = None
    range_support: bool | None = None
    chunk_size: int = 8192
    content_type: str = "application/octet-stream"

    def __post_init__(self):
        object.__setattr__(self, "behavior", Behavior(self.behavior))
        if self.body_length < 0:
            raise ValueError("body_length must be non-negative")
        start, span = self.offset_region
        if self.behavior == Behavior.DYNAMIC_JITTER and (start < 0 or span < 0 or start + span > self.body_length):
            raise ValueError("offset_region must lie inside the body")
        if not 0 <= self.length_jitter_fraction < 1:
            raise ValueError("length_jitter_fraction must be in [0, 1)")

    @property
    def supports_range(self) -> bool:
        if self.range_support is not None:
            return self.range_support
        return self.behavior in (Behavior.STATIC_RANGE, Behavior.NO_CACHE_STATIC)

    @property
    def static(self) -> bool:
        return self.behavior != Behavior.DYNAMIC_JITTER

    def body(self, index: int = 0) -> bytes:
        """Body served to the ``index``-th GET (0-based)."""
        base = make_body(self.body_seed, self.body_length)
        if self.behavior != Behavior.DYNAMIC_JITTER:
            return base
        start, span = self.offset_region
        if self.region_lengths is not None:
            block_len = self.region_lengths[min(index, len(self.region_lengths) - 1)]
        else:
            jitter = int(self.length_jitter_fraction * self.body_length)
            rng = random.Random(f"{self.body_seed}:{index}:len")
            block_len = max(0, span + rng.randint(-jitter, jitter))
        block = random.Random((self.body_seed << 20) ^ (index + 1)).randbytes(block_len)
        return base[:start] + block + base[start + span:]


@dataclass
class RequestEntry:
    index: int
    t: float
    method: str
    path_id: str | None
    range_header: str | None
    status: int
    bytes_planned: int
    client: str
    bytes_served: int = 0
    request_body: int = 0
    user_agent: str | None = None

    def key(self) -> tuple:
        # bytes_served depends on kernel buffering at the cut; everything else is deterministic
        return (self.index, round(self.t, 9), self.method, self.path_id, self.range_header, self.status, self.bytes_planned)


class RequestLog:
    def __init__(self):
        self._entries: list[RequestEntry] = []
        self._lock = threading.Lock()

    def append(self, **fields) -> RequestEntry:
        with self._lock:
            entry = RequestEntry(index=len(self._entries), **fields)
            self._entries.append(entry)
            return entry

    @property
    def entries(self) -> list[RequestEntry]:
        with self._lock:
            return list(self._entries)

    def __len__(self):
        with self._lock:
            return len(self._entries)

    def count(self, method: str) -> int:
        return sum(1 for e in self.entries if e.method == method)

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()

    def deterministic_view(self) -> list[tuple]:
        return [e.key() for e in self.entries]


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: "OriginServer"

    def log_message(self, fmt, *args):
        log.debug("origin: " + fmt, *args)

    def do_GET(self):
        self._serve(head_only=False)

    def do_HEAD(self):
        self._serve(head_only=True)

    def do_POST(self):
        origin = self.server.origin
        length = int(self.headers.get("Content-Length") or 0)
        data = self.rfile.read(length) if length else b""
        if origin.profile.behavior != Behavior.POST_ECHO:
            self._simple(405, b"method not allowed\n", length)
            return
        body = hashlib.sha256(data).hexdigest().encode() + b"\n" + origin.profile.body()
        entry = origin.record("POST", self, 200, len(body), request_body=length)
        self.send_response(200)
        self.send_header("Content-Type", "application/octet-stream")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Connection", "close")
        self.end_headers()
        self._send_body(entry, body)

    def _simple(self, status: int, body: bytes, request_body: int = 0):
        entry = self.server.origin.record(self.command, self, status, len(body), request_body=request_body)
        self.send_response(status)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Connection", "close")
        self.end_headers()
        self._send_body(entry, body)

    def _serve(self, head_only: bool):
        origin = self.server.origin
        profile = origin.profile
        index = origin.next_get_index()
        body = profile.body(index)
        total = len(body)
        range_header = self.headers.get("Range")
        status, start, end = 200, 0, total
        if range_header and profile.supports_range:
            m = _RANGE.match(range_header.strip())
            if m is None or int(m.group(1)) >= max(total, 1):
                self._simple(416, b"", 0)
                return
            start = int(m.group(1))
            end = min(total, int(m.group(2)) + 1) if m.group(2) else total
            status = 206
        payload = body[start:end]
        chunked = profile.behavior == Behavior.CHUNKED
        entry = origin.record(self.command, self, status, 0 if head_only else len(payload))
        self.send_response(status)
        self.send_header("Content-Type", profile.content_type)
        if profile.supports_range:
            self.send_header("Accept-Ranges", "bytes")
        if status == 206:
            self.send_header("Content-Range", f"bytes {start}-{end - 1}/{total}")
        if profile.behavior == Behavior.NO_CACHE_STATIC:
            self.send_header("Cache-Control", "no-cache")
        if chunked:
            self.send_header("Transfer-Encoding", "chunked")
        else:
            self.send_header("Content-Length", str(len(payload)))
        self.send_header("Connection", "close")
        self.end_headers()
        if head_only:
            return
        if chunked:
            self._send_chunked(entry, payload, profile.chunk_size)
        else:
            self._send_body(entry, payload)

    def _send_body(self, entry: RequestEntry, payload: bytes):
        try:
            for i in range(0, len(payload), SEND_PIECE):
                piece = payload[i:i + SEND_PIECE]
                self.wfile.write(piece)
                entry.bytes_served += len(piece)
            self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError, ssl.SSLError, OSError):
            self.close_connection = True

    def _send_chunked(self, entry: RequestEntry, payload: bytes, size: int):
        try:
            for i in range(0, len(payload), size):
                piece = payload[i:i + size]
                self.wfile.write(b"%x\r\n%s\r\n" % (len(piece), piece))
                entry.bytes_served += len(piece)
            self.wfile.write(b"0\r\n\r\n")
            self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError, ssl.SSLError, OSError):
            self.close_connection = True


class OriginServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, origin: "Origin", ssl_context: ssl.SSLContext | None):
        self.origin = origin
        self.ssl_context = ssl_context
        super().__init__(address, _Handler)

    def finish_request(self, request, client_address):
        if self.ssl_context is not None:
            try:
                request.settimeout(10)
                request = self.ssl_context.wrap_socket(request, server_side=True)
            except (ssl.SSLError, OSError) as exc:
                log.debug("origin TLS handshake failed: %s", exc)
                return
        super().finish_request(request, client_address)

    def handle_error(self, request, client_address):
        log.debug("origin handler error from %s", client_address, exc_info=True)


class Origin:
    """A running origin server plus its request log."""

    def __init__(
        self,
        profile: OriginProfile,
        host: str = "127.0.0.1",
        port: int = 0,
        clock=None,
        ssl_context: ssl.SSLContext | None = None,
        hostname: str | None = None,
        path_lookup: Callable[[str], str | None] = path_for_source,
    ):
        self.profile = profile
        self.clock = clock
        self.path_lookup = path_lookup
        self.log = RequestLog()
        self._gets = 0
        self._lock = threading.Lock()
        try:
            self.server = OriginServer((host, port), self, ssl_context)
        except OSError as exc:
            raise RuntimeError(f"cannot bind origin on {host}:{port}: {exc}") from exc
        self.host, self.port = self.server.server_address[:2]
        self.hostname = hostname or self.host
        self.scheme = "https" if ssl_context is not None else "http"
        self._thread = threading.Thread(target=self.server.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
        self._thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return (self.host, self.port)

    def url(self, path: str = "/object") -> str:
        return f"{self.scheme}://{self.hostname}:{self.port}{path}"

    def now(self) -> float:
        return self.clock.now() if self.clock is not None else time.monotonic()

    def next_get_index(self) -> int:
        with self._lock:
            index = self._gets
            self._gets += 1
            return index

    def body(self, index: int = 0) -> bytes:
        return self.profile.body(index)

    def record(self, method: str, handler: BaseHTTPRequestHandler, status: int, planned: int, request_body: int = 0) -> RequestEntry:
        client_ip = handler.client_address[0]
        return self.log.append(
            t=self.now(),
            method=method,
            path_id=self.path_lookup(client_ip),
            range_header=handler.headers.get("Range"),
            user_agent=handler.headers.get("User-Agent"),
            status=status,
            bytes_planned=planned,
            client=client_ip,
            request_body=request_body,
        )

    def close(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def spawn_origin(profile: OriginProfile, **kwargs) -> Origin:
    return Origin(profile, **kwargs)


def fixture_profiles(seed: int = 1, length: int = 64 * 1024) -> dict[str, OriginProfile]:
    """One profile per behavior, for probes and contract tests."""
    return {
        b.value: OriginProfile(
            b, body_seed=seed, body_length=length,
            length_jitter_fraction=0.005 if b == Behavior.DYNAMIC_JITTER else 0.0,
            offset_region=(length // 4, length // 8),
        )
        for b in Behavior
    }
