"""TLS interception for the resumption proxy.

The proxy terminates TLS toward the client with leaf certificates issued by
a local root CA (the single trust anchor the device installs) and opens its
own fully verified TLS session to the real server. Upstream verification
failures go through a :class:`CertificatePolicy`; nothing is accepted
silently.
"""

from __future__ import annotations

import datetime
import ipaddress
import json
import logging
import os
import re
import ssl
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID

log = logging.getLogger(__name__)

ROOT_VALIDITY = datetime.timedelta(days=3650)
LEAF_VALIDITY = datetime.timedelta(days=90)
CA_CERT_FILE = "ca.pem"
CA_KEY_FILE = "ca-key.pem"

_HOST_LABEL = re.compile(r"^(?!-)[A-Za-z0-9-]{1,63}(?<!-)$")


class CaStoreError(Exception):
    """The CA store exists but cannot be used as is."""


def valid_hostname(name: str) -> bool:
    try:
        ipaddress.ip_address(name)
        return True
    except ValueError:
        pass
    if not name or len(name) > 253:
        return False
    return all(_HOST_LABEL.match(label) for label in name.rstrip(".").split("."))


def _now() -> datetime.datetime:
    return datetime.datetime.now(datetime.timezone.utc)


def _new_key() -> ec.EllipticCurvePrivateKey:
    return ec.generate_private_key(ec.SECP256R1())


def _key_pem(key) -> bytes:
    return key.private_bytes(
        encoding=serialization.Encoding.PEM,
        format=serialization.PrivateFormat.PKCS8,
        encryption_algorithm=serialization.NoEncryption(),
    )


def _cert_pem(cert: x509.Certificate) -> bytes:
    return cert.public_bytes(serialization.Encoding.PEM)


def _write_private(path: Path, data: bytes) -> None:
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)


def generate_ca(common_name: str = "flowmigrate local CA", validity: datetime.timedelta = ROOT_VALIDITY):
    key = _new_key()
    name = x509.Name([
        x509.NameAttribute(NameOID.COMMON_NAME, common_name),
        x509.NameAttribute(NameOID.ORGANIZATION_NAME, "flowmigrate"),
    ])
    start = _now() - datetime.timedelta(minutes=5)
    cert = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(start)
        .not_valid_after(start + validity)
        .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
        .add_extension(
            x509.KeyUsage(
                digital_signature=True, content_commitment=False, key_encipherment=False,
                data_encipherment=False, key_agreement=False, key_cert_sign=True,
                crl_sign=True, encipher_only=False, decipher_only=False,
            ),
            critical=True,
        )
        .add_extension(x509.SubjectKeyIdentifier.from_public_key(key.public_key()), critical=False)
        .sign(key, hashes.SHA256())
    )
    return cert, key


def _san_entry(name: str):
    try:
        return x509.IPAddress(ipaddress.ip_address(name))
    except ValueError:
        return x509.DNSName(name)


def issue_cert(ca_cert: x509.Certificate | None, ca_key, names: list[str], validity: datetime.timedelta = LEAF_VALIDITY):
    """Issue a server certificate for ``names``; self-signed when ``ca_cert`` is None."""
    key = _new_key()
    subject = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, names[0][:64])])
    issuer = ca_cert.subject if ca_cert is not None else subject
    signer = ca_key if ca_cert is not None else key
    start = _now() - datetime.timedelta(minutes=5)
    builder = (
        x509.CertificateBuilder()
        .subject_name(subject)
        .issuer_name(issuer)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(start)
        .not_valid_after(start + validity)
        .add_extension(x509.SubjectAlternativeName([_san_entry(n) for n in names]), critical=False)
        .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
        .add_extension(x509.ExtendedKeyUsage([ExtendedKeyUsageOID.SERVER_AUTH]), critical=False)
    )
    if ca_cert is not None:
        builder = builder.add_extension(
            x509.AuthorityKeyIdentifier.from_issuer_public_key(ca_cert.public_key()), critical=False
        )
    return builder.sign(signer, hashes.SHA256()), key


@dataclass(frozen=True)
class LocalCa:
    cert: x509.Certificate
    key: ec.EllipticCurvePrivateKey = field(repr=False)
    directory: Path

    @property
    def cert_path(self) -> Path:
        return self.directory / CA_CERT_FILE

    @property
    def created(self) -> datetime.datetime:
        return self.cert.not_valid_before_utc

    @property
    def validity(self) -> datetime.timedelta:
        return self.cert.not_valid_after_utc - self.cert.not_valid_before_utc

    @property
    def cert_pem(self) -> bytes:
        return _cert_pem(self.cert)

    def export(self, path: str | Path) -> Path:
        """Write the root certificate (never the key) for trust-store installation."""
        path = Path(path)
        path.write_bytes(self.cert_pem)
        return path


def ensure_ca(store_path: str | Path) -> LocalCa:
    """Load the CA in ``store_path``, creating it if the directory holds none.

    A half-present or unreadable store raises :class:`CaStoreError` and is
    left untouched: regenerating would invalidate the installed trust anchor.
    """
    store = Path(store_path).expanduser()
    cert_path, key_path = store / CA_CERT_FILE, store / CA_KEY_FILE
    have_cert, have_key = cert_path.exists(), key_path.exists()
    if have_cert and have_key:
        try:
            cert = x509.load_pem_x509_certificate(cert_path.read_bytes())
            key = serialization.load_pem_private_key(key_path.read_bytes(), password=None)
        except (ValueError, TypeError, OSError) as exc:
            raise CaStoreError(f"CA store {store} is unreadable: {exc}") from exc
        if key.public_key().public_bytes(
            serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
        ) != cert.public_key().public_bytes(
            serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
        ):
            raise CaStoreError(f"CA store {store}: key does not match certificate")
        return LocalCa(cert=cert, key=key, directory=store)
    if have_cert or have_key:
        raise CaStoreError(f"CA store {store} is incomplete")
    store.mkdir(parents=True, exist_ok=True)
    cert, key = generate_ca()
    _write_private(key_path, _key_pem(key))
    cert_path.write_bytes(_cert_pem(cert))
    log.info("created local CA in %s", store)
    return LocalCa(cert=cert, key=key, directory=store)


@dataclass(frozen=True)
class Leaf:
    domain: str
    cert_pem: bytes
    cert_path: Path
    key_path: Path
    issued_at: float
    issue_seconds: float

    @property
    def cert(self) -> x509.Certificate:
        return x509.load_pem_x509_certificate(self.cert_pem)


def _leaf_stem(domain: str) -> str:
    return domain.lower().rstrip(".").replace(":", "_")


class LeafCertCache:
    """One leaf per domain, on disk as ``<domain>.pem`` + ``<domain>.key.pem``.

    Concurrent first requests for the same domain share a single issuance.
    """

    def __init__(self, ca: LocalCa, directory: str | Path | None = None):
        self.ca = ca
        self.directory = Path(directory) if directory is not None else ca.directory / "leaves"
        self.directory.mkdir(parents=True, exist_ok=True)
        self._leaves: dict[str, Leaf] = {}
        self._contexts: dict[str, ssl.SSLContext] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()
        self.issue_times: list[float] = []

    def __len__(self) -> int:
        return len(self._leaves)

    def __contains__(self, domain: str) -> bool:
        return _leaf_stem(domain) in self._leaves

    def _lock_for(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def _load(self, key: str) -> Leaf | None:
        cert_path = self.directory / f"{key}.pem"
        key_path = self.directory / f"{key}.key.pem"
        if not (cert_path.exists() and key_path.exists()):
            return None
        pem = cert_path.read_bytes()
        try:
            cert = x509.load_pem_x509_certificate(pem)
            cert.verify_directly_issued_by(self.ca.cert)
        except (ValueError, TypeError, InvalidSignature):
            log.warning("discarding cached leaf for %s: not issued by the current CA", key)
            return None
        if cert.not_valid_after_utc <= _now():
            return None
        return Leaf(key, pem, cert_path, key_path, issued_at=cert_path.stat().st_mtime, issue_seconds=0.0)

    def get(self, domain: str) -> Leaf:
        key = _leaf_stem(domain)
        leaf = self._leaves.get(key)
        if leaf is not None:
            return leaf
        with self._lock_for(key):
            leaf = self._leaves.get(key)
            if leaf is not None:
                return leaf
            leaf = self._load(key)
            if leaf is None:
                t0 = time.perf_counter()
                cert, leaf_key = issue_cert(self.ca.cert, self.ca.key, [domain])
                cert_path = self.directory / f"{key}.pem"
                key_path = self.directory / f"{key}.key.pem"
                _write_private(key_path, _key_pem(leaf_key))
                pem = _cert_pem(cert)
                cert_path.write_bytes(pem)
                elapsed = time.perf_counter() - t0
                self.issue_times.append(elapsed)
                log.info("issued leaf for %s in %.3f s", domain, elapsed)
                leaf = Leaf(key, pem, cert_path, key_path, issued_at=time.time(), issue_seconds=elapsed)
            self._leaves[key] = leaf
            return leaf

    def context(self, domain: str) -> ssl.SSLContext:
        key = _leaf_stem(domain)
        ctx = self._contexts.get(key)
        if ctx is None:
            leaf = self.get(domain)
            ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
            ctx.load_cert_chain(leaf.cert_path, leaf.key_path)
            with self._guard:
                ctx = self._contexts.setdefault(key, ctx)
        return ctx


def issue_leaf(domain: str, ca: LocalCa, cache: LeafCertCache) -> Leaf:
    if not valid_hostname(domain):
        raise ValueError(f"not a valid hostname: {domain!r}")
    if cache.ca is not ca and cache.ca.cert != ca.cert:
        raise ValueError("cache belongs to a different CA")
    return cache.get(domain)


class CertificatePolicy:
    """Decides whether to proceed when the real server's certificate fails verification.

    Modes: ``deny`` refuses, ``prompt`` asks ``prompt(domain, error)`` and
    remembers a yes, ``allow_listed`` accepts only listed domains. The allow
    list is persisted to ``allow_list_path`` when given.
    """

    MODES = ("deny", "prompt", "allow_listed")

    def __init__(
        self,
        mode: str = "deny",
        prompt: Callable[[str, Exception], bool] | None = None,
        allow_list: set[str] | None = None,
        allow_list_path: str | Path | None = None,
    ):
        if mode not in self.MODES:
            raise ValueError(f"unknown certificate policy {mode!r}")
        if mode == "prompt" and prompt is None:
            raise ValueError("prompt mode needs a prompt callback")
        self.mode = mode
        self.prompt = prompt
        self.allow_list_path = Path(allow_list_path) if allow_list_path else None
        self.allow_list = set(allow_list or ())
        if self.allow_list_path and self.allow_list_path.exists():
            self.allow_list |= set(json.loads(self.allow_list_path.read_text()))
        self.events: list[dict] = []
        self._lock = threading.Lock()

    def decide(self, domain: str, error: Exception) -> bool:
        with self._lock:
            if self.mode != "deny" and domain in self.allow_list:
                allowed = True
            elif self.mode == "prompt":
                allowed = bool(self.prompt(domain, error))
                if allowed:
                    self._remember(domain)
            else:
                allowed = False
            self.events.append({"domain": domain, "error": str(error), "allowed": allowed})
        log.warning("upstream certificate for %s failed verification (%s); %s", domain, error,
                    "proceeding" if allowed else "refusing")
        return allowed

    def _remember(self, domain: str) -> None:
        self.allow_list.add(domain)
        if self.allow_list_path:
            self.allow_list_path.write_text(json.dumps(sorted(self.allow_list)))


def cli_prompt(domain: str, error: Exception) -> bool:
    answer = input(f"Certificate for {domain} is not valid ({error}). Continue anyway? [y/N] ")
    return answer.strip().lower() in ("y", "yes")


class Interceptor:
    """Everything the proxy needs to intercept a CONNECT.

    ``upstream_context`` is the verifying client context used toward real
    servers (system trust store by default). With ``tunnel_first_access``
    the first CONNECT to a domain is tunneled blindly while its leaf is
    issued in the background.
    """

    def __init__(
        self,
        ca: LocalCa,
        cache: LeafCertCache | None = None,
        upstream_context: ssl.SSLContext | None = None,
        policy: CertificatePolicy | None = None,
        tunnel_first_access: bool = False,
    ):
        self.ca = ca
        self.cache = cache or LeafCertCache(ca)
        self.upstream_context = upstream_context or ssl.create_default_context()
        self.upstream_context.check_hostname = True
        self.upstream_context.verify_mode = ssl.CERT_REQUIRED
        self.policy = policy or CertificatePolicy("deny")
        self.tunnel_first_access = tunnel_first_access
        self._insecure = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
        self._insecure.check_hostname = False
        self._insecure.verify_mode = ssl.CERT_NONE
        self._seen: set[str] = set()
        self._lock = threading.Lock()

    def should_intercept(self, domain: str) -> bool:
        if not self.tunnel_first_access:
            return True
        with self._lock:
            first = domain not in self._seen and domain not in self.cache
            self._seen.add(domain)
        if first:
            threading.Thread(target=self.cache.get, args=(domain,), daemon=True).start()
            return False
        return True

    def upstream_wrapper(self, domain: str, verify: bool = True) -> Callable:
        ctx = self.upstream_context if verify else self._insecure

        def wrap(raw):
            return ctx.wrap_socket(raw, server_hostname=domain)

        return wrap

    def wrap_client(self, client_sock, domain: str):
        """Handshake with the client, presenting a leaf for its SNI (or ``domain``)."""
        base = self.cache.context(domain)

        def pick(sslobj, server_name, _ctx):
            if server_name and server_name != domain and valid_hostname(server_name):
                sslobj.context = self.cache.context(server_name)

        base.sni_callback = pick
        return base.wrap_socket(client_sock, server_side=True)
