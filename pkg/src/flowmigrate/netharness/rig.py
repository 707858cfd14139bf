"""One proxied download over a simulated path with scheduled outages."""

from __future__ import annotations

import hashlib
import ssl
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from ..flow_manager import PathKind, PathState
from ..resumption.proxy import OutcomeLog, ProxyConfig, ResumptionProxy, TransferRecord
from .client import FetchResult, fetch
from .clock import VirtualClock
from .origin import Origin, OriginProfile
from .paths import SimulatedPath

RIG_SOURCE_IP = "127.0.0.2"


def random_outages(rng, max_outages: int = 3, horizon: float = 1.5, max_length: float = 4.0) -> list[tuple[float, float]]:
    """Up to ``max_outages`` non-overlapping (down, up) windows starting before ``horizon``."""
    n = int(rng.integers(1, max_outages + 1))
    starts = sorted(float(x) for x in rng.uniform(0.02, horizon, n))
    out = []
    last_up = 0.0
    for s in starts:
        s = max(s, last_up + 0.01)
        up = s + float(rng.uniform(0.05, max_length))
        out.append((round(s, 6), round(up, 6)))
        last_up = up
    return out


class TlsSetup:
    """Shared certificates for intercepted runs: harness PKI for origins, local CA for the proxy."""

    def __init__(self, directory: str | Path | None = None, tunnel_first_access: bool = False):
        from ..tls import CertificatePolicy, LeafCertCache, ensure_ca
        from .pki import HarnessPki

        self._tmp = None
        if directory is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="flowmigrate-tls-")
            directory = self._tmp.name
        directory = Path(directory)
        self.pki = HarnessPki(directory / "harness")
        self.ca = ensure_ca(directory / "ca")
        self.cache = LeafCertCache(self.ca)
        self.tunnel_first_access = tunnel_first_access
        self.policy = CertificatePolicy("deny")
        self._trusted = self.pki.server_context("localhost", trusted=True)
        self._self_signed = None

    def origin_context(self, trusted: bool = True) -> ssl.SSLContext:
        if trusted:
            return self._trusted
        if self._self_signed is None:
            self._self_signed = self.pki.server_context("localhost", trusted=False)
        return self._self_signed

    def interceptor(self):
        from ..tls import Interceptor

        return Interceptor(self.ca, self.cache, upstream_context=self.pki.client_context(),
                           policy=self.policy, tunnel_first_access=self.tunnel_first_access)

    def client_context(self) -> ssl.SSLContext:
        """What a device with the local root installed would use."""
        return ssl.create_default_context(cadata=self.ca.cert_pem.decode())

    def cleanup(self) -> None:
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None


@dataclass
class RigResult:
    fetch: FetchResult
    expected: bytes
    record: TransferRecord | None
    requests: list = field(default_factory=list)
    virtual_time: float = 0.0

    @property
    def byte_exact(self) -> bool:
        return self.fetch.ok and hashlib.sha256(self.fetch.body).digest() == hashlib.sha256(self.expected).digest()

    @property
    def served_bytes(self) -> int:
        return sum(r.bytes_served for r in self.requests)

    @property
    def range_starts(self) -> list[int | None]:
        out = []
        for r in self.requests:
            h = r.range_header
            out.append(int(h.split("=", 1)[1].split("-", 1)[0]) if h else None)
        return out


def proxied_download(
    profile: OriginProfile,
    outages=(),
    rate: int = 1 << 20,
    config: ProxyConfig | None = None,
    tls: TlsSetup | None = None,
    trusted_origin: bool = True,
    method: str = "GET",
    body: bytes = b"",
    headers=(),
    client_timeout: float = 60.0,
) -> RigResult:
    """Fetch one object through the proxy while the upstream path follows ``outages``.

    Everything upstream of the proxy runs on a fresh virtual clock, so the
    outcome depends only on the inputs.
    """
    clock = VirtualClock()
    path = SimulatedPath("wifi", PathKind.WIFI, RIG_SOURCE_IP, clock, rate=rate)
    for down, up in outages:
        clock.schedule(down, lambda: path.set_state(PathState.DOWN))
        clock.schedule(up, lambda: path.set_state(PathState.UP))
    origin_ctx = tls.origin_context(trusted_origin) if tls else None
    origin = Origin(profile, clock=clock, ssl_context=origin_ctx, hostname="localhost" if tls else None)
    cfg = config or ProxyConfig()
    cfg = ProxyConfig(**{**cfg.__dict__, "listen_port": 0, "workers": 1})
    outcome_log = OutcomeLog()
    proxy = ResumptionProxy(cfg, selector=path, interceptor=tls.interceptor() if tls else None,
                            outcome_log=outcome_log, clock=clock)
    try:
        proxy.start()
        result = fetch(origin.url(), proxy=proxy.address, method=method, body=body, headers=headers,
                       timeout=client_timeout, ssl_context=tls.client_context() if tls else None)
        proxy.wait_idle(client_timeout)
    finally:
        proxy.shutdown(grace_s=1)
        origin.close()
        clock.cancel_all()
    records = [r for r in outcome_log.records if r.outcome != "tunneled"]
    expected = profile.body(0)
    if method == "POST":
        expected = hashlib.sha256(body).hexdigest().encode() + b"\n" + profile.body()
    return RigResult(result, expected, records[-1] if records else None, list(origin.log.entries), clock.now())
