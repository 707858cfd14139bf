import os
import socket
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowmigrate.resumption.agent import (
    Action,
    ClientSink,
    FramingError,
    OverlapWindow,
    Reason,
    ResumeClass,
    TransferState,
    UpstreamFailure,
    classify_resumability,
    decide_resume,
    detect_timeout,
    offset_order,
    reconcile_overlap,
    relay_body,
)
from flowmigrate.resumption.httpio import (
    BodyReader,
    ProtocolError,
    Reader,
    StreamClosed,
    end_to_end,
    parse_request_head,
    parse_response_head,
)


def req(text):
    return parse_request_head(text.replace("\n", "\r\n").encode() + b"\r\n")


def resp(text, request=None):
    return parse_response_head(text.replace("\n", "\r\n").encode() + b"\r\n", request)


GET = "GET http://o/x HTTP/1.1\nHost: o\n"


def test_classify_range_resumable():
    r = resp("HTTP/1.1 200 OK\nAccept-Ranges: bytes\nContent-Length: 1000\n")
    assert classify_resumability(req(GET), r) == ResumeClass.RANGE_RESUMABLE


def test_classify_post_never_resumes():
    post = req("POST http://o/x HTTP/1.1\nHost: o\nContent-Length: 5\n")
    r = resp("HTTP/1.1 200 OK\nAccept-Ranges: bytes\nContent-Length: 1000\n")
    assert classify_resumability(post, r) == ResumeClass.NEVER_RESUME


def test_classify_body_bearing_put_never_resumes():
    put = req("PUT http://o/x HTTP/1.1\nHost: o\nTransfer-Encoding: chunked\n")
    r = resp("HTTP/1.1 200 OK\nAccept-Ranges: bytes\nContent-Length: 10\n")
    assert classify_resumability(put, r) == ResumeClass.NEVER_RESUME


def test_classify_chunked_restart_and_discard():
    r = resp("HTTP/1.1 200 OK\nTransfer-Encoding: chunked\n")
    assert classify_resumability(req(GET), r) == ResumeClass.RESTART_AND_DISCARD


def test_classify_connection_delimited_restart():
    r = resp("HTTP/1.0 200 OK\nAccept-Ranges: bytes\n")
    assert classify_resumability(req(GET), r) == ResumeClass.RESTART_AND_DISCARD


@pytest.mark.parametrize("req_extra, resp_extra", [
    ("Pragma: no-cache\n", ""),
    ("", "Cache-Control: no-cache\n"),
])
def test_classify_no_cache(req_extra, resp_extra):
    request = req(GET + req_extra)
    r = resp("HTTP/1.1 200 OK\nAccept-Ranges: bytes\nContent-Length: 10\n" + resp_extra, request)
    assert r.no_cache
    assert classify_resumability(request, r) == ResumeClass.NEVER_RESUME
    assert classify_resumability(request, r, ignore_no_cache=True) == ResumeClass.RANGE_RESUMABLE


def test_classify_client_range_never_resumes():
    request = req(GET + "Range: bytes=10-\n")
    r = resp("HTTP/1.1 206 Partial\nAccept-Ranges: bytes\nContent-Length: 10\n")
    assert classify_resumability(request, r) == ResumeClass.NEVER_RESUME


def state_with(delivered, cls, overlap=4096, tries=0):
    s = TransferState(req(GET), overlap_bytes=overlap, resume_class=cls, tries=tries)
    s.record_delivery(bytes(delivered))
    return s


def test_decide_resume_examples():
    d = decide_resume(state_with(10000, ResumeClass.RANGE_RESUMABLE))
    assert (d.action, d.offset) == (Action.RESUME_AT_OFFSET, 5904)
    d = decide_resume(state_with(100, ResumeClass.RANGE_RESUMABLE))
    assert (d.action, d.offset) == (Action.RESUME_AT_OFFSET, 0)
    assert decide_resume(state_with(100, ResumeClass.NEVER_RESUME)).action == Action.ABORT
    d = decide_resume(state_with(10000, ResumeClass.RESTART_AND_DISCARD))
    assert (d.action, d.offset) == (Action.RESTART_DISCARD, 5904)


def test_decide_resume_retry_budget():
    d = decide_resume(state_with(10, ResumeClass.RANGE_RESUMABLE, tries=50))
    assert d == d.__class__(Action.ABORT, Reason.RETRIES_EXHAUSTED)
    assert TransferState(req(GET)).max_retries == 50


@given(st.integers(0, 10**7), st.integers(0, 10**5))
def test_resume_offset_formula(delivered, overlap):
    s = TransferState(req(GET), overlap_bytes=overlap, resume_class=ResumeClass.RANGE_RESUMABLE)
    s.delivered = delivered
    assert decide_resume(s).offset == max(0, delivered - min(delivered, overlap))


@given(st.lists(st.binary(max_size=3000), max_size=20), st.integers(0, 5000))
def test_overlap_window_keeps_tail(chunks, size):
    w = OverlapWindow(size)
    s = TransferState(req(GET), overlap_bytes=size)
    total = b""
    for c in chunks:
        s.record_delivery(c)
        total += c
    assert s.delivered == len(total)
    assert s.window.bytes() == (total[-size:] if size else b"")
    assert len(s.window) == min(len(total), size)


def test_offset_scan_order():
    assert list(offset_order(3)) == [0, 1, -1, 2, -2, 3, -3]


def test_reconcile_identity_and_shift():
    rng = np.random.default_rng(0)
    exp = rng.bytes(4096)
    assert reconcile_overlap(exp, exp + rng.bytes(1024), 1024).offset == 0
    got = reconcile_overlap(exp, b"abc" + exp + rng.bytes(1021), 1024)
    assert got.matched and got.offset == 3 and got.corrected
    got = reconcile_overlap(exp, exp[3:] + rng.bytes(1027), 1024)
    assert got.matched and got.offset == -3


def _brute_force(expected, received, max_offset):
    # every candidate offset, then pick the first in scan order
    w = len(expected)
    hits = set()
    for k in range(-max_offset, max_offset + 1):
        if k >= 0:
            window_ok = received[k:k + w] == expected and len(received) >= k + w
        else:
            window_ok = -k < w and len(received) >= w + k and received[:w + k] == expected[-k:]
        if window_ok:
            hits.add(k)
    for k in [0] + [s * i for i in range(1, max_offset + 1) for s in (1, -1)]:
        if k in hits:
            return True, k
    return False, 0


def test_random_windows_mismatch():
    rng = np.random.default_rng(1)
    for _ in range(20):
        exp, rec = rng.bytes(4096), rng.bytes(4096 + 1024)
        r = reconcile_overlap(exp, rec, 1024)
        assert (r.matched, r.offset) == _brute_force(exp, rec, 1024) == (False, 0)


@settings(max_examples=300)
@given(st.binary(min_size=1, max_size=64), st.integers(-40, 40), st.integers(0, 32),
       st.sampled_from([b"\x00", b"ab", b"\xff\x00"]), st.booleans())
def test_reconcile_matches_brute_force(base, shift, max_offset, filler, periodic):
    # periodic content makes several offsets match; the scan order decides
    exp = (filler * 64)[:len(base)] if periodic else base
    if shift >= 0:
        received = (filler * 40)[:shift] + exp + filler * 20
    else:
        received = exp[-shift:] + filler * 40
    r = reconcile_overlap(exp, received, max_offset)
    assert (r.matched, r.offset) == _brute_force(exp, received, max_offset)
    assert reconcile_overlap(exp, received, max_offset) == r


class _Chunks:
    """recv() source that hands out pre-cut pieces."""

    def __init__(self, pieces, fail_at_end=False):
        self.pieces = list(pieces)
        self.fail = fail_at_end

    def recv(self, n):
        if not self.pieces:
            if self.fail:
                raise ConnectionResetError("cut")
            return b""
        piece = self.pieces.pop(0)
        if len(piece) > n:
            self.pieces.insert(0, piece[n:])
            piece = piece[:n]
        return piece


class _Collect:
    def __init__(self):
        self.data = bytearray()

    def sendall(self, b):
        self.data += b


def test_relay_zero_byte_body():
    body = BodyReader(Reader(_Chunks([])), 0, False)
    s = TransferState(req(GET))
    assert relay_body(body, ClientSink(_Collect(), False), s, idle_limit=None) == 0


def test_relay_10k_bookkeeping():
    data = os.urandom(10240)
    body = BodyReader(Reader(_Chunks([data[:3000], data[3000:]])), len(data), False)
    s = TransferState(req(GET))
    out = _Collect()
    assert relay_body(body, ClientSink(out, False), s, idle_limit=None) == 10240
    assert bytes(out.data) == data and s.delivered == 10240
    assert s.window.bytes() == data[-4096:]
    assert s.steady_retained <= s.overlap_bytes + 2048


def test_relay_upstream_failure():
    body = BodyReader(Reader(_Chunks([b"x" * 100], fail_at_end=True)), 1000, False)
    s = TransferState(req(GET))
    with pytest.raises(UpstreamFailure):
        relay_body(body, ClientSink(_Collect(), False), s, idle_limit=None)
    assert s.delivered == 100


def test_relay_rechunks_for_client():
    body = BodyReader(Reader(_Chunks([b"hello"])), 5, False)
    out = _Collect()
    sink = ClientSink(out, True)
    relay_body(body, sink, TransferState(req(GET)), idle_limit=None)
    sink.finish()
    assert bytes(out.data) == b"5\r\nhello\r\n0\r\n\r\n"


def test_sink_refuses_overrun():
    sink = ClientSink(_Collect(), False, limit=4)
    sink.write(b"ab")
    with pytest.raises(FramingError):
        sink.write(b"abc")


def test_detect_timeout_on_silent_socket():
    a, b = socket.socketpair()
    try:
        t0 = time.monotonic()
        assert detect_timeout(a, 0.3)
        assert 0.3 <= time.monotonic() - t0 < 0.6
        b.sendall(b"x")
        assert not detect_timeout(a, 0.3)
        with pytest.raises(ValueError):
            detect_timeout(a, 0)
    finally:
        a.close()
        b.close()


def test_detect_timeout_never_fires_while_data_flows():
    a, b = socket.socketpair()
    stop = threading.Event()

    def feed():
        while not stop.is_set():
            b.sendall(b"x" * 10)
            time.sleep(0.02)

    th = threading.Thread(target=feed, daemon=True)
    th.start()
    try:
        for _ in range(20):
            assert not detect_timeout(a, 0.2)
            a.recv(4096)
    finally:
        stop.set()
        th.join()
        a.close()
        b.close()


# httpio

def test_request_head_parsing():
    r = req("GET http://example.com:8000/a?b=1 HTTP/1.1\nhost: example.com\nX-Thing: 1\n")
    assert r.get("HOST") == "example.com"
    assert r.split_target() == ("http", "example.com", 8000, "/a?b=1")
    assert r.raw.startswith(b"GET http://example.com:8000/a?b=1")
    assert not r.has_body


@pytest.mark.parametrize("head", [
    "GET /x\n",
    "GET /x HTTP/2\n",
    "get /x HTTP/1.1\n",
])
def test_request_head_rejects(head):
    with pytest.raises(ProtocolError):
        req(head)


def test_origin_form_needs_host():
    with pytest.raises(ProtocolError):
        req("GET /x HTTP/1.1\n").split_target()


def test_response_framing():
    r = resp("HTTP/1.1 200 OK\nContent-Length: 12\nTransfer-Encoding: chunked\n")
    assert r.chunked and r.content_length is None
    r = resp("HTTP/1.1 206 Partial Content\nContent-Range: bytes 100-199/1000\nContent-Length: 100\n")
    assert r.content_range_start() == 100 and r.content_length == 100
    assert resp("HTTP/1.1 204 No Content\n").bodyless("GET")


def test_end_to_end_strips_hop_by_hop():
    hs = [("Connection", "keep-alive, X-Private"), ("X-Private", "1"), ("Keep-Alive", "5"),
          ("Proxy-Connection", "keep-alive"), ("Accept", "*/*"), ("TE", "trailers")]
    assert end_to_end(hs) == [("Accept", "*/*")]


def test_chunked_body_reader():
    raw = b"5\r\nhello\r\n6;ext=1\r\n world\r\n0\r\nTrailer: x\r\n\r\n"
    body = BodyReader(Reader(_Chunks([raw[i:i + 3] for i in range(0, len(raw), 3)])), None, True)
    out = b""
    while not body.done:
        out += body.read(100)
    assert out == b"hello world"


def test_truncated_body_raises():
    body = BodyReader(Reader(_Chunks([b"abc"])), 10, False)
    body.read(10)
    with pytest.raises(StreamClosed):
        body.read(10)
