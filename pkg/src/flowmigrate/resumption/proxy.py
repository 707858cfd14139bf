"""Forward HTTP proxy that resumes interrupted downloads.

Each client connection carries one transfer. When the upstream side breaks
mid-body the proxy re-requests the object (with a Range header when the
server allows it), checks the overlap against what the client already has,
and keeps going from the byte where the client stopped.
"""

from __future__ import annotations

import json
import logging
import socket
import ssl
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

from ..netharness.clock import RealClock
from .agent import (
    DEFAULT_CHUNK_BYTES,
    DEFAULT_IDLE_TIMEOUT_S,
    DEFAULT_MAX_OFFSET_BYTES,
    DEFAULT_MAX_RETRIES,
    DEFAULT_OVERLAP_BYTES,
    Action,
    ClientGone,
    ClientSink,
    FramingError,
    Reason,
    ResumeClass,
    ResumeDecision,
    TransferState,
    UpstreamFailure,
    classify_resumability,
    decide_resume,
    never_resume_reason,
    read_upstream,
    reconcile_overlap,
    relay_body,
)
from .httpio import (
    BodyReader,
    HttpRequestHead,
    ProtocolError,
    Reader,
    StreamClosed,
    authority,
    end_to_end,
    parse_request_head,
    parse_response_head,
    serialize_request,
    serialize_response,
    simple_response,
)

log = logging.getLogger(__name__)

DEFAULT_PORT = 8080


@dataclass
class ProxyConfig:
    listen_host: str = "127.0.0.1"
    listen_port: int = DEFAULT_PORT
    max_retries: int = DEFAULT_MAX_RETRIES
    chunk_bytes: int = DEFAULT_CHUNK_BYTES
    overlap_bytes: int = DEFAULT_OVERLAP_BYTES
    max_offset_bytes: int = DEFAULT_MAX_OFFSET_BYTES
    idle_timeout_s: float = DEFAULT_IDLE_TIMEOUT_S
    ignore_no_cache: bool = False
    retry_backoff_s: float = 0.5
    connect_timeout_s: float = 10.0
    client_timeout_s: float = 30.0
    workers: int = 8
    max_workers: int = 64
    shutdown_grace_s: float = 5.0

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if self.chunk_bytes <= 0:
            raise ValueError("chunk_bytes must be positive")
        if self.overlap_bytes < 0 or self.max_offset_bytes < 0:
            raise ValueError("overlap_bytes and max_offset_bytes must be non-negative")
        if self.idle_timeout_s <= 0:
            raise ValueError("idle_timeout_s must be positive")
        if not 0 <= self.listen_port <= 65535:
            raise ValueError("listen_port out of range")


class Outcome(str, Enum):
    COMPLETED = "completed"
    FAILED = "failed"
    CLIENT_GONE = "client_gone"
    BAD_REQUEST = "bad_request"
    BAD_GATEWAY = "bad_gateway"
    TUNNELED = "tunneled"
    DENIED = "denied"


@dataclass
class TransferRecord:
    url: str
    status: int
    bytes: int
    tries: int
    resume_class: str | None
    outcome: str
    duration_s: float
    method: str = ""
    reason: str | None = None
    upstream_requests: int = 0
    upstream_bytes: int = 0
    discarded_bytes: int = 0
    offsets: list = field(default_factory=list)
    resume_points: list = field(default_factory=list)
    peak_retained: int = 0
    steady_retained: int = 0
    largest_read: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class OutcomeLog:
    """Thread-safe JSONL sink plus an in-memory copy."""

    def __init__(self, sink=None):
        self._lock = threading.Lock()
        self.records: list[TransferRecord] = []
        self._own = False
        if isinstance(sink, (str, Path)):
            self._fh = open(sink, "a", encoding="utf-8")
            self._own = True
        else:
            self._fh = sink

    def append(self, record: TransferRecord) -> None:
        with self._lock:
            self.records.append(record)
            if self._fh is not None:
                self._fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
                self._fh.flush()

    def close(self) -> None:
        if self._own and self._fh is not None:
            self._fh.close()
            self._fh = None


class DirectConnector:
    """Upstream selector that just uses the host's default route."""

    def open_connection(self, address, timeout=None, wrap=None, **_):
        raw = socket.create_connection(address, timeout=timeout)
        raw.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            return wrap(raw) if wrap is not None else raw
        except Exception:
            raw.close()
            raise


class _AttemptError(Exception):
    def __init__(self, msg: str, connect: bool):
        super().__init__(msg)
        self.connect = connect


class _HardFailure(Exception):
    """The transfer cannot continue; the client gets a truncated body."""


class _Counting:
    """Counts bytes read from an upstream stream."""

    def __init__(self, stream):
        self.stream = stream
        self.count = 0

    def recv(self, n):
        data = self.stream.recv(n)
        self.count += len(data)
        return data

    @property
    def raw(self):
        return getattr(self.stream, "raw", self.stream)

    def __getattr__(self, name):
        return getattr(self.stream, name)


def _abort(sock) -> None:
    """Close with RST so a connection-delimited client cannot mistake truncation for EOF."""
    raw = getattr(sock, "raw", None) or sock
    try:
        raw.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
    except OSError:
        pass
    _close(sock)


def _close(sock) -> None:
    if sock is None:
        return
    try:
        sock.close()
    except OSError:
        pass


class ResumptionProxy:
    """The proxy server.

    ``selector`` opens upstream connections: anything with
    ``open_connection(address, timeout=..., wrap=...)``, such as a
    :class:`~flowmigrate.flow_manager.FlowManager` (which uses its current
    primary path) or a single path. ``interceptor`` enables TLS
    interception for CONNECT requests.
    """

    def __init__(self, config: ProxyConfig | None = None, selector=None, interceptor=None, outcome_log: OutcomeLog | None = None, clock=None):
        self.config = config or ProxyConfig()
        self.selector = selector or DirectConnector()
        self.interceptor = interceptor
        self.outcomes = outcome_log or OutcomeLog()
        self.clock = clock or RealClock()
        self._sock: socket.socket | None = None
        self._pool: ThreadPoolExecutor | None = None
        self._thread: threading.Thread | None = None
        self._stopping = threading.Event()
        self._idle = threading.Condition()
        self._active: set = set()
        self.address: tuple[str, int] | None = None

    # server lifecycle

    def bind(self) -> tuple[str, int]:
        cfg = self.config
        try:
            self._sock = socket.create_server((cfg.listen_host, cfg.listen_port), backlog=128)
        except OSError as exc:
            raise RuntimeError(f"cannot listen on {cfg.listen_host}:{cfg.listen_port}: {exc}") from exc
        self._sock.settimeout(0.2)
        self.address = self._sock.getsockname()[:2]
        self._pool = ThreadPoolExecutor(max_workers=max(cfg.max_workers, cfg.workers), thread_name_prefix="proxy")
        warm = threading.Barrier(cfg.workers + 1) if cfg.workers > 0 else None
        for _ in range(cfg.workers):
            self._pool.submit(self._warm, warm)
        if warm is not None:
            try:
                warm.wait(timeout=5)
            except threading.BrokenBarrierError:
                pass
        log.info("proxy listening on %s:%d", *self.address)
        return self.address

    @staticmethod
    def _warm(barrier):
        # hold each thread until all exist so the pool really pre-creates them
        try:
            barrier.wait(timeout=5)
        except threading.BrokenBarrierError:
            pass

    def serve(self) -> None:
        """Accept until :meth:`shutdown`; blocks the calling thread."""
        if self._sock is None:
            self.bind()
        while not self._stopping.is_set():
            try:
                client, addr = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                if self._stopping.is_set():
                    break
                raise
            with self._idle:
                self._active.add(client)
            try:
                self._pool.submit(self._run, client, addr)
            except RuntimeError:
                self._finish(client)
                _close(client)

    def start(self) -> tuple[str, int]:
        address = self.bind()
        self._thread = threading.Thread(target=self.serve, name="proxy-accept", daemon=True)
        self._thread.start()
        return address

    def active(self) -> int:
        with self._idle:
            return len(self._active)

    def wait_idle(self, timeout: float | None = None) -> bool:
        with self._idle:
            return self._idle.wait_for(lambda: not self._active, timeout)

    def shutdown(self, grace_s: float | None = None) -> None:
        """Stop accepting, let transfers finish for ``grace_s``, then cut them."""
        grace = self.config.shutdown_grace_s if grace_s is None else grace_s
        self._stopping.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
        if self._sock is not None:
            _close(self._sock)
        if not self.wait_idle(grace):
            with self._idle:
                stuck = list(self._active)
            log.warning("aborting %d transfers at shutdown", len(stuck))
            for client in stuck:
                try:
                    client.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
            self.wait_idle(5)
        if self._pool is not None:
            self._pool.shutdown(wait=False)
        self.outcomes.close()

    def __enter__(self):
        if self.address is None:
            self.start()
        return self

    def __exit__(self, *exc):
        self.shutdown()

    def _finish(self, client) -> None:
        with self._idle:
            self._active.discard(client)
            if not self._active:
                self._idle.notify_all()

    def _run(self, client, addr) -> None:
        try:
            self.handle_connection(client)
        except Exception:
            log.exception("unhandled error serving %s", addr)
        finally:
            _close(client)
            self._finish(client)

    # per connection

    def handle_connection(self, client) -> TransferRecord | None:
        cfg = self.config
        client.settimeout(cfg.client_timeout_s)
        reader = Reader(client, cfg.chunk_bytes)
        t0 = self.clock.now()
        try:
            head = reader.read_head()
            request = parse_request_head(head)
            if request.is_connect:
                return self._handle_connect(client, reader, request, t0)
            scheme, host, port, path = request.split_target()
            if scheme != "http":
                raise ProtocolError("https requests must use CONNECT")
        except StreamClosed:
            return None
        except (ProtocolError, OSError) as exc:
            return self._reject(client, "-", 400, "Bad Request", Outcome.BAD_REQUEST, t0, str(exc))
        return self._transfer(client, reader, request, request.target, host, port, path, None, None, t0)

    def _log(self, record: TransferRecord) -> TransferRecord:
        self.outcomes.append(record)
        return record

    def _reject(self, client, url, status, reason, outcome, t0, detail="", method="") -> TransferRecord:
        try:
            client.sendall(simple_response(status, reason, (detail + "\n").encode("utf-8", "replace")))
        except OSError:
            pass
        log.info("%s %s -> %d (%s)", method or "-", url, status, detail)
        return self._log(TransferRecord(url=url, status=status, bytes=0, tries=0, resume_class=None,
                                        outcome=outcome.value, duration_s=self.clock.now() - t0, method=method,
                                        reason=detail or None))

    def _open(self, host, port, wrap):
        try:
            return self.selector.open_connection((host, port), timeout=self.config.connect_timeout_s, wrap=wrap)
        except ssl.SSLCertVerificationError:
            raise
        except OSError as exc:
            raise _AttemptError(f"connect to {host}:{port} failed: {exc}", connect=True) from exc

    # CONNECT

    def _handle_connect(self, client, reader, request: HttpRequestHead, t0):
        try:
            host, port = authority(request.target)
        except ProtocolError as exc:
            return self._reject(client, request.target, 400, "Bad Request", Outcome.BAD_REQUEST, t0, str(exc), "CONNECT")
        url = f"https://{request.target}"
        icpt = self.interceptor
        if icpt is None or not icpt.should_intercept(host):
            return self._tunnel(client, reader, host, port, url, t0)
        wrap = icpt.upstream_wrapper(host)
        try:
            try:
                upstream = self._open(host, port, wrap)
            except ssl.SSLCertVerificationError as err:
                if not icpt.policy.decide(host, err):
                    log.warning("refusing %s: %s", host, err.verify_message or err)
                    return self._reject(client, url, 502, "Bad Gateway", Outcome.DENIED, t0,
                                        f"upstream certificate rejected: {err.verify_message or err}", "CONNECT")
                wrap = icpt.upstream_wrapper(host, verify=False)
                upstream = self._open(host, port, wrap)
        except (_AttemptError, ssl.SSLError, OSError) as exc:
            return self._reject(client, url, 502, "Bad Gateway", Outcome.BAD_GATEWAY, t0, str(exc), "CONNECT")
        try:
            client.sendall(b"HTTP/1.1 200 Connection Established\r\n\r\n")
            tls_client = icpt.wrap_client(client, host)
        except (ssl.SSLError, OSError) as exc:
            log.warning("client TLS handshake for %s failed: %s", host, exc)
            _close(upstream)
            return self._log(TransferRecord(url=url, status=0, bytes=0, tries=0, resume_class=None,
                                            outcome=Outcome.CLIENT_GONE.value, duration_s=self.clock.now() - t0,
                                            method="CONNECT", reason=f"client handshake: {exc}"))
        inner = Reader(tls_client, self.config.chunk_bytes)
        default_host = host if port == 443 else f"{host}:{port}"
        try:
            head = inner.read_head()
            req = parse_request_head(head)
            scheme, _, _, path = req.split_target("https", default_host)
        except StreamClosed:
            _close(upstream)
            return None
        except (ProtocolError, OSError) as exc:
            _close(upstream)
            return self._reject(tls_client, url, 400, "Bad Request", Outcome.BAD_REQUEST, t0, str(exc))
        full_url = f"https://{default_host}{path}"
        try:
            return self._transfer(tls_client, inner, req, full_url, host, port, path, wrap, upstream, t0)
        finally:
            _close(tls_client)

    def _tunnel(self, client, reader, host, port, url, t0):
        try:
            upstream = self._open(host, port, None)
        except _AttemptError as exc:
            return self._reject(client, url, 502, "Bad Gateway", Outcome.BAD_GATEWAY, t0, str(exc), "CONNECT")
        moved = [0, 0]
        try:
            client.sendall(b"HTTP/1.1 200 Connection Established\r\n\r\n")
            client.settimeout(None)
            upstream.settimeout(None)
            early = reader.read(reader.buffered) if reader.buffered else b""
            if early:
                upstream.sendall(early)

            def pump(src, dst, slot):
                try:
                    while True:
                        data = src.recv(65536)
                        if not data:
                            break
                        dst.sendall(data)
                        moved[slot] += len(data)
                except OSError:
                    pass
                finally:
                    for s in (src, dst):
                        try:
                            s.shutdown(socket.SHUT_RDWR)
                        except OSError:
                            pass

            up = threading.Thread(target=pump, args=(client, upstream, 0), daemon=True)
            up.start()
            pump(upstream, client, 1)
            up.join(timeout=5)
        except OSError:
            pass
        finally:
            _close(upstream)
        return self._log(TransferRecord(url=url, status=200, bytes=moved[1], tries=0, resume_class=None,
                                        outcome=Outcome.TUNNELED.value, duration_s=self.clock.now() - t0,
                                        method="CONNECT"))

    # one transfer

    def _request_bytes(self, request: HttpRequestHead, host, port, path, body: bytes, range_start: int | None) -> bytes:
        headers = end_to_end(request.headers)
        if range_start is not None:
            headers = [(k, v) for k, v in headers if k.lower() != "range"]
            headers.append(("Range", f"bytes={range_start}-"))
        if not any(k.lower() == "host" for k, _ in headers):
            headers.insert(0, ("Host", host if port in (80, 443) else f"{host}:{port}"))
        headers = [(k, v) for k, v in headers if k.lower() != "content-length"]
        if body or request.content_length is not None or request.chunked:
            headers.append(("Content-Length", str(len(body))))
        headers.append(("Connection", "close"))
        return serialize_request(request.method, path, "HTTP/1.1", headers) + body

    def _transfer(self, client, reader, request, url, host, port, path, wrap, first_conn, t0) -> TransferRecord:
        cfg = self.config
        record = TransferRecord(url=url, status=0, bytes=0, tries=0, resume_class=None,
                                outcome=Outcome.FAILED.value, duration_s=0.0, method=request.method)
        try:
            body = self._read_request_body(reader, request)
        except (ProtocolError, StreamClosed, OSError) as exc:
            _close(first_conn)
            return self._reject(client, url, 400, "Bad Request", Outcome.BAD_REQUEST, t0, str(exc), request.method)
        state = TransferState(request, max_retries=cfg.max_retries, overlap_bytes=cfg.overlap_bytes)
        conn = first_conn
        upstream_counters: list[_Counting] = []

        def attempt(range_start):
            nonlocal conn
            if conn is None:
                conn = self._open(host, port, wrap)
            conn.settimeout(cfg.idle_timeout_s)
            counted = _Counting(conn)
            upstream_counters.append(counted)
            record.upstream_requests += 1
            try:
                conn.sendall(self._request_bytes(request, host, port, path, body, range_start))
                ureader = Reader(counted, cfg.chunk_bytes)
                return ureader, parse_response_head(ureader.read_head(), request)
            except (OSError, StreamClosed, ProtocolError) as exc:
                _close(conn)
                conn = None
                raise _AttemptError(str(exc) or type(exc).__name__, connect=False) from exc

        def finish(outcome: Outcome, reason=None) -> TransferRecord:
            _close(conn)
            record.outcome = outcome.value
            record.reason = reason if reason is None else str(reason)
            record.bytes = state.delivered
            record.tries = state.tries
            record.resume_class = state.resume_class.value if state.resume_class else None
            record.upstream_bytes = sum(c.count for c in upstream_counters)
            record.discarded_bytes = state.discarded
            record.peak_retained = state.peak_retained
            record.steady_retained = state.steady_retained
            record.largest_read = state.largest_read
            record.duration_s = self.clock.now() - t0
            log.info("%s %s -> %s %s bytes=%d tries=%d", request.method, url, record.status, outcome.value, state.delivered, state.tries)
            return self._log(record)

        # initial response head
        while True:
            try:
                ureader, rhead = attempt(None)
                break
            except ssl.SSLCertVerificationError as exc:
                return self._bad_gateway(client, record, finish, f"upstream certificate rejected: {exc}")
            except _AttemptError as exc:
                if (exc.connect and state.tries == 0) or request.has_body or state.tries >= cfg.max_retries:
                    return self._bad_gateway(client, record, finish, exc)
                state.tries += 1
                self.clock.sleep(cfg.retry_backoff_s)

        record.status = rhead.status
        state.response = rhead
        state.resume_class = classify_resumability(request, rhead, cfg.ignore_no_cache)
        state.reason = never_resume_reason(request, rhead, cfg.ignore_no_cache)
        client_chunked = rhead.chunked and request.version == "HTTP/1.1"
        headers = end_to_end(rhead.headers)
        if client_chunked:
            headers.append(("Transfer-Encoding", "chunked"))
        headers.append(("Connection", "close"))
        sink = ClientSink(client, client_chunked, limit=rhead.content_length)
        try:
            client.sendall(serialize_response(rhead.status, rhead.reason, headers))
        except OSError:
            return finish(Outcome.CLIENT_GONE)
        if rhead.bodyless(request.method):
            return finish(Outcome.COMPLETED)
        body_reader = BodyReader(ureader, rhead.content_length, rhead.chunked)

        while True:
            try:
                relay_body(body_reader, sink, state, cfg.chunk_bytes, cfg.idle_timeout_s)
                sink.finish()
                if rhead.content_length is not None and sink.written != rhead.content_length:
                    _abort(client)
                    return finish(Outcome.FAILED, "length mismatch")
                return finish(Outcome.COMPLETED)
            except ClientGone:
                return finish(Outcome.CLIENT_GONE)
            except FramingError as exc:
                _abort(client)
                return finish(Outcome.FAILED, exc)
            except UpstreamFailure as exc:
                log.debug("upstream broke at %d bytes: %s", state.delivered, exc)
                _close(conn)
                conn = None
            # resume loop
            while True:
                decision = decide_resume(state)
                if decision.action == Action.ABORT:
                    _abort(client)
                    return finish(Outcome.FAILED, decision.reason.value)
                state.tries += 1
                self.clock.sleep(cfg.retry_backoff_s)
                range_start = decision.offset if decision.action == Action.RESUME_AT_OFFSET else None
                record.resume_points.append([state.delivered, range_start])
                try:
                    ureader, rhead2 = attempt(range_start)
                except ssl.SSLCertVerificationError as exc:
                    _abort(client)
                    return finish(Outcome.FAILED, exc)
                except _AttemptError as exc:
                    log.debug("retry %d failed: %s", state.tries, exc)
                    continue
                try:
                    body_reader = self._resume(state, decision, ureader, rhead2, sink)
                    record.offsets.append(state.last_offset)
                    break
                except UpstreamFailure as exc:
                    log.debug("resume attempt %d broke: %s", state.tries, exc)
                    _close(conn)
                    conn = None
                except ClientGone:
                    return finish(Outcome.CLIENT_GONE)
                except (_HardFailure, FramingError) as exc:
                    _abort(client)
                    return finish(Outcome.FAILED, exc)

    def _bad_gateway(self, client, record, finish, exc):
        record.status = 502
        try:
            client.sendall(simple_response(502, "Bad Gateway", (str(exc) + "\n").encode("utf-8", "replace")))
        except OSError:
            pass
        return finish(Outcome.BAD_GATEWAY, exc)

    def _read_request_body(self, reader: Reader, request: HttpRequestHead) -> bytes:
        if request.chunked:
            br = BodyReader(reader, None, True)
        elif request.content_length:
            br = BodyReader(reader, request.content_length, False)
        else:
            return b""
        out = bytearray()
        while not br.done:
            data = br.read(65536)
            if not data:
                break
            out += data
        return bytes(out)

    def _resume(self, state: TransferState, decision: ResumeDecision, ureader: Reader, rhead, sink: ClientSink) -> BodyReader:
        """Position a fresh upstream response at the client's byte and verify the overlap."""
        cfg = self.config
        w = state.overlap_length
        start = state.delivered - w
        skip = start
        if rhead.status >= 500:
            raise UpstreamFailure(f"upstream answered {rhead.status}")
        if decision.action == Action.RESUME_AT_OFFSET and rhead.status == 206:
            if rhead.content_range_start() != start:
                # server ignored our offset; fall back to a full restart next try
                state.resume_class = ResumeClass.RESTART_AND_DISCARD
                raise UpstreamFailure(f"Content-Range {rhead.get('Content-Range')!r} does not start at {start}")
            skip = 0
        elif rhead.status == 200:
            if decision.action == Action.RESUME_AT_OFFSET:
                state.resume_class = ResumeClass.RESTART_AND_DISCARD
        else:
            raise _HardFailure(f"upstream answered {rhead.status} on resume")
        body = BodyReader(ureader, rhead.content_length, rhead.chunked)
        while skip > 0:
            data = read_upstream(body, min(skip, 65536), cfg.idle_timeout_s)
            if not data:
                raise _HardFailure("resumed body ended before the client's position")
            skip -= len(data)
            state.discarded += len(data)
        need = w + cfg.max_offset_bytes
        received = bytearray()
        while len(received) < need and not body.done:
            data = read_upstream(body, need - len(received), cfg.idle_timeout_s)
            if not data:
                break
            received += data
        state.note_retained(len(received))
        result = reconcile_overlap(state.window.bytes(), bytes(received), cfg.max_offset_bytes)
        if not result.matched:
            raise _HardFailure(f"overlap mismatch after {state.delivered} bytes")
        state.last_offset = result.offset
        state.discarded += w + result.offset
        tail = bytes(received[w + result.offset:])
        if tail:
            sink.write(tail)
            state.record_delivery(tail)
        return body
