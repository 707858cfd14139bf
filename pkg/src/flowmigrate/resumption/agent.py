"""Resume decisions and byte bookkeeping for interrupted HTTP transfers.

Everything here is transport-agnostic; :mod:`flowmigrate.resumption.proxy`
drives it against real sockets.
"""

from __future__ import annotations

import fcntl
import select
import socket
import ssl
import struct
import termios
import time
from dataclasses import dataclass, field
from enum import Enum

from .httpio import BodyReader, HttpRequestHead, HttpResponseHead, StreamClosed

DEFAULT_MAX_RETRIES = 50
DEFAULT_CHUNK_BYTES = 2048
DEFAULT_OVERLAP_BYTES = 4096
DEFAULT_MAX_OFFSET_BYTES = 1024
DEFAULT_IDLE_TIMEOUT_S = 5.0
MAX_READ_BYTES = 256 * 1024


class ResumeClass(str, Enum):
    RANGE_RESUMABLE = "RangeResumable"
    RESTART_AND_DISCARD = "RestartAndDiscard"
    NEVER_RESUME = "NeverResume"


class Action(str, Enum):
    RESUME_AT_OFFSET = "ResumeAtOffset"
    RESTART_DISCARD = "RestartDiscard"
    ABORT = "Abort"


class Reason(str, Enum):
    RANGE_SUPPORTED = "range_supported"
    NO_RANGE_SUPPORT = "no_range_support"
    REQUEST_BODY = "request_body"
    NO_CACHE = "no_cache"
    CLIENT_RANGE = "client_range"
    RETRIES_EXHAUSTED = "retries_exhausted"


def never_resume_reason(request: HttpRequestHead, response: HttpResponseHead | None, ignore_no_cache: bool = False) -> Reason | None:
    if request.has_body:
        return Reason.REQUEST_BODY
    if request.get("Range") is not None:
        return Reason.CLIENT_RANGE
    no_cache = response.no_cache if response is not None else request.no_cache
    if no_cache and not ignore_no_cache:
        return Reason.NO_CACHE
    return None


def classify_resumability(request: HttpRequestHead, response: HttpResponseHead, ignore_no_cache: bool = False) -> ResumeClass:
    if never_resume_reason(request, response, ignore_no_cache) is not None:
        return ResumeClass.NEVER_RESUME
    if response.accept_ranges and response.content_length is not None:
        return ResumeClass.RANGE_RESUMABLE
    return ResumeClass.RESTART_AND_DISCARD


class OverlapWindow:
    """The trailing bytes of what has been delivered to the client."""

    def __init__(self, size: int):
        if size < 0:
            raise ValueError("overlap size must be non-negative")
        self.size = size
        self._buf = bytearray()

    def push(self, data: bytes) -> None:
        if not self.size:
            return
        if len(data) >= self.size:
            self._buf[:] = data[-self.size:]
            return
        self._buf += data
        extra = len(self._buf) - self.size
        if extra > 0:
            del self._buf[:extra]

    def bytes(self) -> bytes:
        return bytes(self._buf)

    def __len__(self) -> int:
        return len(self._buf)


@dataclass
class TransferState:
    request: HttpRequestHead
    response: HttpResponseHead | None = None
    delivered: int = 0
    tries: int = 0
    max_retries: int = DEFAULT_MAX_RETRIES
    resume_class: ResumeClass | None = None
    overlap_bytes: int = DEFAULT_OVERLAP_BYTES
    window: OverlapWindow = field(init=False)
    peak_retained: int = 0
    steady_retained: int = 0
    largest_read: int = 0
    discarded: int = 0
    reason: Reason | None = None
    last_offset: int = 0

    def __post_init__(self):
        self.window = OverlapWindow(self.overlap_bytes)

    def record_delivery(self, data: bytes) -> None:
        self.delivered += len(data)
        self.window.push(data)

    @property
    def overlap_length(self) -> int:
        return min(self.delivered, self.overlap_bytes)

    def note_retained(self, extra: int = 0) -> None:
        self.peak_retained = max(self.peak_retained, len(self.window) + extra)

    def note_steady(self, extra: int = 0) -> None:
        """Held between relay reads: the overlap window plus unread buffered input."""
        self.steady_retained = max(self.steady_retained, len(self.window) + extra)
        self.note_retained(extra)


@dataclass(frozen=True)
class ResumeDecision:
    action: Action
    reason: Reason
    offset: int = 0


def decide_resume(state: TransferState) -> ResumeDecision:
    if state.tries >= state.max_retries:
        return ResumeDecision(Action.ABORT, Reason.RETRIES_EXHAUSTED)
    if state.resume_class == ResumeClass.NEVER_RESUME:
        return ResumeDecision(Action.ABORT, state.reason or Reason.REQUEST_BODY)
    offset = max(0, state.delivered - state.overlap_length)
    if state.resume_class == ResumeClass.RANGE_RESUMABLE:
        return ResumeDecision(Action.RESUME_AT_OFFSET, Reason.RANGE_SUPPORTED, offset)
    return ResumeDecision(Action.RESTART_DISCARD, Reason.NO_RANGE_SUPPORT, offset)


@dataclass(frozen=True)
class Reconciliation:
    matched: bool
    offset: int = 0

    @property
    def corrected(self) -> bool:
        return self.matched and self.offset != 0


MISMATCH = Reconciliation(False)


def offset_order(max_offset: int):
    yield 0
    for k in range(1, max_offset + 1):
        yield k
        yield -k


def reconcile_overlap(expected: bytes, received: bytes, max_offset: int) -> Reconciliation:
    """Locate ``expected`` inside ``received`` allowing a small shift.

    ``received`` starts where ``expected`` started in the previous response.
    A shift of +k means the new content has k extra bytes before this point,
    so ``expected`` sits at ``received[k:k+W]``. A shift of -k means k bytes
    went missing, so only ``expected[k:]`` can be seen, at ``received[:W-k]``.
    Offsets are tried in order 0, +1, -1, +2, ... and the first hit wins.
    """
    w = len(expected)
    if w == 0:
        return Reconciliation(True, 0)
    for k in offset_order(max_offset):
        if k >= 0:
            if k + w <= len(received) and received[k:k + w] == expected:
                return Reconciliation(True, k)
        elif -k < w and w + k <= len(received) and received[:w + k] == expected[-k:]:
            return Reconciliation(True, k)
    return MISMATCH


def available_bytes(stream) -> int:
    """Bytes readable without blocking (0 when unknown)."""
    pending = getattr(stream, "pending", None)
    n = pending() if pending else 0
    raw = getattr(stream, "raw", stream)
    if n == 0 and isinstance(raw, socket.socket) and not isinstance(raw, ssl.SSLSocket):
        try:
            buf = fcntl.ioctl(raw.fileno(), termios.FIONREAD, b"\0\0\0\0")
            n = struct.unpack("i", buf)[0]
        except OSError:
            n = 0
    return n


def detect_timeout(stream, idle_limit: float) -> bool:
    """Wait until ``stream`` is readable; True if ``idle_limit`` seconds pass first."""
    if idle_limit <= 0:
        raise ValueError("idle_limit must be positive")
    if available_bytes(stream) > 0:
        return False
    deadline = time.monotonic() + idle_limit
    while True:
        left = deadline - time.monotonic()
        if left <= 0:
            return True
        try:
            ready, _, _ = select.select([stream], [], [], left)
        except (OSError, ValueError):
            return False  # closed under us; the next read reports it
        if ready:
            return False


class UpstreamFailure(Exception):
    """The upstream side stopped delivering; the resume loop takes over."""


class ClientGone(Exception):
    """Writing to the client failed."""


class FramingError(Exception):
    """More body bytes than the Content-Length promised to the client."""


class ClientSink:
    """Writes body bytes to the client, re-chunking if asked."""

    def __init__(self, stream, chunked: bool, limit: int | None = None):
        self.stream = stream
        self.chunked = chunked
        self.limit = limit
        self.written = 0

    def write(self, data: bytes) -> None:
        if not data:
            return
        if self.limit is not None and self.written + len(data) > self.limit:
            raise FramingError(f"body exceeds Content-Length {self.limit}")
        try:
            if self.chunked:
                self.stream.sendall(b"%x\r\n%s\r\n" % (len(data), data))
            else:
                self.stream.sendall(data)
        except OSError as exc:
            raise ClientGone(str(exc)) from exc
        self.written += len(data)

    def finish(self) -> None:
        if self.chunked:
            try:
                self.stream.sendall(b"0\r\n\r\n")
            except OSError as exc:
                raise ClientGone(str(exc)) from exc


def await_upstream(body: BodyReader, idle_limit: float | None) -> None:
    """Block until the upstream has bytes (or EOF); UpstreamFailure after ``idle_limit`` of silence."""
    reader = body.reader
    try:
        if idle_limit and reader.buffered == 0 and detect_timeout(reader.stream, idle_limit):
            raise UpstreamFailure(f"no data for {idle_limit:g} s")
    except OSError as exc:
        raise UpstreamFailure(str(exc) or type(exc).__name__) from exc


def read_upstream(body: BodyReader, n: int, idle_limit: float | None) -> bytes:
    """One upstream read, mapping every failure to :class:`UpstreamFailure`."""
    await_upstream(body, idle_limit)
    try:
        return body.read(n)
    except (StreamClosed, OSError) as exc:
        raise UpstreamFailure(str(exc) or type(exc).__name__) from exc


def relay_body(body: BodyReader, sink: ClientSink, state: TransferState, chunk_bytes: int = DEFAULT_CHUNK_BYTES, idle_limit: float | None = DEFAULT_IDLE_TIMEOUT_S) -> int:
    """Copy the rest of ``body`` to the client; returns bytes forwarded.

    Returns normally at end of body. Raises :class:`UpstreamFailure` when
    the upstream side breaks and :class:`ClientGone` when the client does.
    """
    forwarded = 0
    while not body.done:
        # size the read after waiting, so one wakeup drains what has arrived
        await_upstream(body, idle_limit)
        n = max(chunk_bytes, min(available_bytes(body.reader.stream), MAX_READ_BYTES))
        data = read_upstream(body, n, None)
        if not data:
            break
        sink.write(data)
        state.record_delivery(data)
        state.largest_read = max(state.largest_read, len(data))
        state.note_steady(body.reader.buffered)
        forwarded += len(data)
    return forwarded
