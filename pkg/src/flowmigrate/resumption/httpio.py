"""HTTP/1.x message heads and body framing over socket-like streams."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from email.message import Message
from http.client import parse_headers
from urllib.parse import urlsplit

MAX_HEAD = 64 * 1024

HOP_BY_HOP = frozenset({
    "connection", "proxy-connection", "keep-alive", "te", "trailer", "upgrade",
    "proxy-authenticate", "proxy-authorization", "transfer-encoding",
})


class ProtocolError(Exception):
    """Malformed HTTP from a peer."""


class StreamClosed(ConnectionError):
    """Peer closed the stream before a complete message arrived."""


class Reader:
    """Buffered reader on top of anything with ``recv``."""

    def __init__(self, stream, read_size: int = 2048):
        self.stream = stream
        self.read_size = read_size
        self._buf = bytearray()

    @property
    def buffered(self) -> int:
        return len(self._buf)

    def _fill(self, n: int | None = None) -> bool:
        data = self.stream.recv(n or self.read_size)
        if not data:
            return False
        self._buf += data
        return True

    def read_head(self) -> bytes:
        while True:
            idx = self._buf.find(b"\r\n\r\n")
            if idx >= 0:
                head = bytes(self._buf[: idx + 4])
                del self._buf[: idx + 4]
                return head
            if len(self._buf) > MAX_HEAD:
                raise ProtocolError("header section too large")
            if not self._fill():
                if self._buf:
                    raise StreamClosed("stream closed inside a message head")
                raise StreamClosed("stream closed before a message head")

    def readline(self) -> bytes:
        while True:
            idx = self._buf.find(b"\r\n")
            if idx >= 0:
                line = bytes(self._buf[: idx + 2])
                del self._buf[: idx + 2]
                return line
            if len(self._buf) > MAX_HEAD:
                raise ProtocolError("line too long")
            if not self._fill():
                raise StreamClosed("stream closed inside a line")

    def read(self, n: int) -> bytes:
        """Up to ``n`` bytes; b'' only at end of stream."""
        if not self._buf:
            # nothing buffered: hand the recv result straight back
            return self.stream.recv(n)
        out = bytes(self._buf[:n])
        del self._buf[:n]
        return out

    def read_exact(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            chunk = self.read(n - len(out))
            if not chunk:
                raise StreamClosed(f"stream closed after {len(out)} of {n} bytes")
            out += chunk
        return bytes(out)


def _parse_fields(lines: bytes) -> Message:
    try:
        return parse_headers(io.BytesIO(lines))
    except Exception as exc:
        raise ProtocolError(f"bad header section: {exc}") from None


def _header_items(msg: Message) -> list[tuple[str, str]]:
    return [(k, v) for k, v in msg.items()]


@dataclass
class HttpRequestHead:
    method: str
    target: str
    version: str
    headers: list[tuple[str, str]] = field(default_factory=list)
    raw: bytes = b""

    def get(self, name: str, default: str | None = None) -> str | None:
        lname = name.lower()
        for k, v in self.headers:
            if k.lower() == lname:
                return v
        return default

    @property
    def is_connect(self) -> bool:
        return self.method == "CONNECT"

    @property
    def content_length(self) -> int | None:
        value = self.get("Content-Length")
        if value is None:
            return None
        try:
            n = int(value)
        except ValueError:
            raise ProtocolError(f"bad Content-Length {value!r}") from None
        if n < 0:
            raise ProtocolError("negative Content-Length")
        return n

    @property
    def chunked(self) -> bool:
        return "chunked" in (self.get("Transfer-Encoding") or "").lower()

    @property
    def has_body(self) -> bool:
        return self.chunked or bool(self.content_length)

    @property
    def no_cache(self) -> bool:
        return "no-cache" in (self.get("Pragma") or "").lower()

    def wants_close(self) -> bool:
        conn = (self.get("Proxy-Connection") or self.get("Connection") or "").lower()
        if self.version == "HTTP/1.0":
            return "keep-alive" not in conn
        return "close" in conn

    def split_target(self, default_scheme: str = "http", default_host: str | None = None):
        """Return (scheme, host, port, origin-form path)."""
        if self.target.startswith("/"):
            host_header = self.get("Host") or default_host
            if not host_header:
                raise ProtocolError("origin-form request without Host")
            parts = urlsplit(f"{default_scheme}://{host_header}{self.target}")
        else:
            parts = urlsplit(self.target)
        if parts.scheme not in ("http", "https") or not parts.hostname:
            raise ProtocolError(f"unsupported request target {self.target!r}")
        port = parts.port or (443 if parts.scheme == "https" else 80)
        path = parts.path or "/"
        if parts.query:
            path += "?" + parts.query
        return parts.scheme, parts.hostname, port, path


def parse_request_head(head: bytes) -> HttpRequestHead:
    line, _, rest = head.partition(b"\r\n")
    try:
        method, target, version = line.decode("latin-1").split(" ")
    except ValueError:
        raise ProtocolError(f"bad request line {line[:80]!r}") from None
    if version not in ("HTTP/1.0", "HTTP/1.1"):
        raise ProtocolError(f"unsupported version {version}")
    if not method.isalpha() or not method.isupper():
        raise ProtocolError(f"bad method {method[:20]!r}")
    msg = _parse_fields(rest)
    return HttpRequestHead(method, target, version, _header_items(msg), raw=head)


def authority(target: str) -> tuple[str, int]:
    host, sep, port = target.rpartition(":")
    if not sep or not port.isdigit():
        raise ProtocolError(f"bad CONNECT authority {target!r}")
    return host.strip("[]"), int(port)


@dataclass
class HttpResponseHead:
    status: int
    reason: str
    version: str
    headers: list[tuple[str, str]] = field(default_factory=list)
    request_no_cache: bool = False
    raw: bytes = b""

    def get(self, name: str, default: str | None = None) -> str | None:
        lname = name.lower()
        for k, v in self.headers:
            if k.lower() == lname:
                return v
        return default

    @property
    def chunked(self) -> bool:
        return "chunked" in (self.get("Transfer-Encoding") or "").lower()

    @property
    def content_length(self) -> int | None:
        if self.chunked:
            return None
        value = self.get("Content-Length")
        if value is None:
            return None
        try:
            n = int(value.split(",")[0])
        except ValueError:
            raise ProtocolError(f"bad Content-Length {value!r}") from None
        if n < 0:
            raise ProtocolError("negative Content-Length")
        return n

    @property
    def accept_ranges(self) -> bool:
        return "bytes" in (self.get("Accept-Ranges") or "").lower()

    @property
    def no_cache(self) -> bool:
        cc = (self.get("Cache-Control") or "").lower()
        return self.request_no_cache or "no-cache" in cc

    def content_range_start(self) -> int | None:
        value = self.get("Content-Range")
        if not value or not value.lower().startswith("bytes "):
            return None
        span = value[6:].split("/")[0]
        start = span.split("-")[0].strip()
        return int(start) if start.isdigit() else None

    def bodyless(self, method: str) -> bool:
        return method == "HEAD" or self.status in (204, 304) or 100 <= self.status < 200


def parse_response_head(head: bytes, request: HttpRequestHead | None = None) -> HttpResponseHead:
    line, _, rest = head.partition(b"\r\n")
    parts = line.decode("latin-1").split(" ", 2)
    if len(parts) < 2 or not parts[0].startswith("HTTP/1.") or not parts[1].isdigit():
        raise ProtocolError(f"bad status line {line[:80]!r}")
    msg = _parse_fields(rest)
    return HttpResponseHead(
        status=int(parts[1]),
        reason=parts[2] if len(parts) > 2 else "",
        version=parts[0],
        headers=_header_items(msg),
        request_no_cache=bool(request and request.no_cache),
        raw=head,
    )


def serialize_request(method: str, path: str, version: str, headers: list[tuple[str, str]]) -> bytes:
    lines = [f"{method} {path} {version}"] + [f"{k}: {v}" for k, v in headers]
    return ("\r\n".join(lines) + "\r\n\r\n").encode("latin-1")


def serialize_response(status: int, reason: str, headers: list[tuple[str, str]], version: str = "HTTP/1.1") -> bytes:
    lines = [f"{version} {status} {reason}".rstrip()] + [f"{k}: {v}" for k, v in headers]
    return ("\r\n".join(lines) + "\r\n\r\n").encode("latin-1")


def end_to_end(headers: list[tuple[str, str]], drop: tuple[str, ...] = ()) -> list[tuple[str, str]]:
    """Headers minus hop-by-hop ones (including any named in Connection)."""
    named = set()
    for k, v in headers:
        if k.lower() == "connection":
            named |= {t.strip().lower() for t in v.split(",")}
    skip = HOP_BY_HOP | named | {d.lower() for d in drop}
    return [(k, v) for k, v in headers if k.lower() not in skip]


def simple_response(status: int, reason: str, body: bytes = b"") -> bytes:
    head = serialize_response(status, reason, [
        ("Content-Type", "text/plain"), ("Content-Length", str(len(body))), ("Connection", "close"),
    ])
    return head + body


class BodyReader:
    """Decoded response (or request) body.

    Raises :class:`StreamClosed` when the stream ends before the framing says
    it should. Connection-delimited bodies end at a clean EOF.
    """

    def __init__(self, reader: Reader, length: int | None, chunked: bool):
        self.reader = reader
        self.remaining = length
        self.chunked = chunked
        self._chunk_left = 0
        self.done = length == 0 and not chunked

    def read(self, n: int) -> bytes:
        if self.done:
            return b""
        if self.chunked:
            return self._read_chunked(n)
        if self.remaining is None:
            data = self.reader.read(n)
            if not data:
                self.done = True
            return data
        data = self.reader.read(min(n, self.remaining))
        if not data:
            raise StreamClosed(f"body ended with {self.remaining} bytes missing")
        self.remaining -= len(data)
        if self.remaining == 0:
            self.done = True
        return data

    def _read_chunked(self, n: int) -> bytes:
        if self._chunk_left == 0:
            line = self.reader.readline()
            try:
                size = int(line.split(b";")[0].strip(), 16)
            except ValueError:
                raise ProtocolError(f"bad chunk size line {line[:40]!r}") from None
            if size == 0:
                while self.reader.readline() != b"\r\n":
                    pass
                self.done = True
                return b""
            self._chunk_left = size
        data = self.reader.read(min(n, self._chunk_left))
        if not data:
            raise StreamClosed("stream closed inside a chunk")
        self._chunk_left -= len(data)
        if self._chunk_left == 0:
            if self.reader.read_exact(2) != b"\r\n":
                raise ProtocolError("missing CRLF after chunk")
        return data
