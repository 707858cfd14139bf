"""Minimal HTTP client for harness runs.

Works over any stream with ``recv``/``sendall`` (plain sockets, TLS
sockets, path connections), which ``http.client`` cannot do.
"""

from __future__ import annotations

import hashlib
import socket
import ssl
from dataclasses import dataclass
from urllib.parse import urlsplit

from ..resumption.httpio import (
    BodyReader,
    HttpResponseHead,
    ProtocolError,
    Reader,
    StreamClosed,
    parse_response_head,
    serialize_request,
)

USER_AGENTS = {
    "mobile": "Mozilla/5.0 (Linux; Android 14; Pixel 8) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/124.0 Mobile Safari/537.36",
    "desktop": "Mozilla/5.0 (X11; Linux x86_64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/124.0 Safari/537.36",
}


@dataclass
class FetchResult:
    url: str
    status: int | None
    body: bytes
    head: HttpResponseHead | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        """Fully completed without errors."""
        return self.error is None and self.status is not None and 200 <= self.status < 300

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.body).hexdigest()


def _split(url: str):
    parts = urlsplit(url)
    if parts.scheme not in ("http", "https") or not parts.hostname:
        raise ValueError(f"unsupported URL {url!r}")
    port = parts.port or (443 if parts.scheme == "https" else 80)
    path = (parts.path or "/") + (f"?{parts.query}" if parts.query else "")
    return parts.scheme, parts.hostname, port, path


def exchange(stream, method: str, target: str, host_header: str, headers=(), body: bytes = b"", read_size: int = 65536, out: bytearray | None = None, on_head=None):
    """Send one request on ``stream`` and read the complete response.

    Body bytes accumulate in ``out`` (when given) so a caller still has them
    if the stream breaks.
    """
    hdrs = [("Host", host_header), *headers]
    if body or method in ("POST", "PUT"):
        hdrs.append(("Content-Length", str(len(body))))
    hdrs.append(("Connection", "close"))
    stream.sendall(serialize_request(method, target, "HTTP/1.1", hdrs) + body)
    reader = Reader(stream, read_size)
    head = parse_response_head(reader.read_head())
    if on_head is not None:
        on_head(head)
    if head.bodyless(method):
        return head, b""
    br = BodyReader(reader, head.content_length, head.chunked)
    out = bytearray() if out is None else out
    while not br.done:
        data = br.read(read_size)
        if not data:
            break
        out += data
    return head, bytes(out)


def fetch(
    url: str,
    proxy: tuple[str, int] | None = None,
    opener=None,
    method: str = "GET",
    headers=(),
    body: bytes = b"",
    timeout: float = 30.0,
    ssl_context: ssl.SSLContext | None = None,
    user_agent: str | None = None,
) -> FetchResult:
    """GET/POST ``url`` directly, through ``opener`` (a path or flow manager), or via an HTTP proxy.

    Never raises for transport trouble; failures land in ``FetchResult.error``
    together with whatever body bytes had arrived.
    """
    scheme, host, port, path = _split(url)
    headers = list(headers)
    if user_agent:
        headers.append(("User-Agent", USER_AGENTS.get(user_agent, user_agent)))
    host_header = host if port in (80, 443) else f"{host}:{port}"
    stream = None
    head = None
    partial = bytearray()
    seen = []
    try:
        if proxy is not None:
            stream = socket.create_connection(proxy, timeout=timeout)
            if scheme == "https":
                stream.sendall(f"CONNECT {host}:{port} HTTP/1.1\r\nHost: {host}:{port}\r\n\r\n".encode())
                reader = Reader(stream, 4096)
                reply = parse_response_head(reader.read_head())
                if reply.status != 200:
                    return FetchResult(url, reply.status, b"", reply, f"CONNECT refused with {reply.status}")
                stream = (ssl_context or ssl.create_default_context()).wrap_socket(stream, server_hostname=host)
                target = path
            else:
                target = url
        else:
            wrap = None
            if scheme == "https":
                ctx = ssl_context or ssl.create_default_context()
                wrap = lambda raw: ctx.wrap_socket(raw, server_hostname=host)  # noqa: E731
            if opener is not None:
                stream = opener.open_connection((host, port), timeout=timeout, wrap=wrap)
            else:
                raw = socket.create_connection((host, port), timeout=timeout)
                stream = wrap(raw) if wrap else raw
            target = path
        stream.settimeout(timeout)
        head, data = exchange(stream, method, target, host_header, headers, body, out=partial, on_head=seen.append)
        return FetchResult(url, head.status, data, head)
    except (OSError, StreamClosed, ProtocolError, ValueError) as exc:
        head = seen[-1] if seen else head
        return FetchResult(url, head.status if head else None, bytes(partial), head, f"{type(exc).__name__}: {exc}")
    finally:
        if stream is not None:
            try:
                stream.close()
            except OSError:
                pass
