"""Certificates for TLS origins: one harness CA, plus self-signed strays."""

from __future__ import annotations

import ssl
import tempfile
from pathlib import Path

from cryptography.hazmat.primitives import serialization

from ..tls import generate_ca, issue_cert


def _pem_pair(cert, key) -> tuple[bytes, bytes]:
    cert_pem = cert.public_bytes(serialization.Encoding.PEM)
    key_pem = key.private_bytes(
        serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8, serialization.NoEncryption()
    )
    return cert_pem, key_pem


class HarnessPki:
    """A throwaway CA that harness clients (and the proxy upstream side) trust."""

    def __init__(self, directory: str | Path | None = None):
        self._tmp = None
        if directory is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="flowmigrate-pki-")
            directory = self._tmp.name
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.ca_cert, self.ca_key = generate_ca("flowmigrate harness CA")
        self.ca_path = self.directory / "harness-ca.pem"
        self.ca_path.write_bytes(_pem_pair(self.ca_cert, self.ca_key)[0])

    def server_context(self, hostname: str = "localhost", trusted: bool = True) -> ssl.SSLContext:
        """Server context for ``hostname``; ``trusted=False`` gives a self-signed certificate."""
        if trusted:
            cert, key = issue_cert(self.ca_cert, self.ca_key, [hostname])
        else:
            cert, key = issue_cert(None, None, [hostname])
        stem = f"{hostname}-{'ca' if trusted else 'self'}"
        cert_path = self.directory / f"{stem}.pem"
        key_path = self.directory / f"{stem}.key.pem"
        cert_pem, key_pem = _pem_pair(cert, key)
        cert_path.write_bytes(cert_pem)
        key_path.write_bytes(key_pem)
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        ctx.load_cert_chain(cert_path, key_path)
        return ctx

    def client_context(self) -> ssl.SSLContext:
        ctx = ssl.create_default_context(cafile=str(self.ca_path))
        return ctx

    def cleanup(self) -> None:
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None
