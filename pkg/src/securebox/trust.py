"""Certification authority, signatures and link sealing.

Certificate layout (108 bytes):

    subject_id u32 | public key[32] | issued_at u64 | CA signature[64]

The CA signature covers the first 44 bytes.  Keys are Ed25519; signatures
are detached and 64 bytes long.  Sealing uses ChaCha20-Poly1305 with a
per-box link key and a nonce derived from (box_id, seq), so a sealed
update is never encrypted twice under the same nonce.
"""

from __future__ import annotations
import logging
import random
import struct
from dataclasses import dataclass, field
from typing import Callable

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey, Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import DuplicateSubject, MalformedFrame, UnknownSubject

logger = logging.getLogger(__name__)

KEY_SIZE = 32
SIGNATURE_SIZE = 64
CSS_SUBJECT_ID = 0          # box ids start at 1

_CERT_BODY = struct.Struct(">I32sQ")
CERT_SIZE = _CERT_BODY.size + SIGNATURE_SIZE
_NONCE = struct.Struct(">IQ")


@dataclass(frozen=True, slots=True)
class KeyPair:
    private_key: Ed25519PrivateKey

    @classmethod
    def generate(cls, rng: random.Random | None = None) -> "KeyPair":
        """Fresh keypair; reproducible when an RNG is supplied."""
        if rng is None:
            return cls(Ed25519PrivateKey.generate())
        return cls(Ed25519PrivateKey.from_private_bytes(rng.randbytes(KEY_SIZE)))

    @property
    def public_bytes(self) -> bytes:
        return self.private_key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)

    def sign(self, data: bytes) -> bytes:
        return self.private_key.sign(data)


def verify_signature(public_key: bytes, data: bytes, signature: bytes) -> bool:
    """Total: any malformed key or signature simply fails."""
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, data)
    except (InvalidSignature, ValueError):
        return False
    return True


@dataclass(frozen=True, slots=True)
class Certificate:
    subject_id: int
    public_key: bytes
    issued_at: int
    ca_signature: bytes

    @property
    def body(self) -> bytes:
        return _CERT_BODY.pack(self.subject_id, self.public_key, self.issued_at)

    def encode(self) -> bytes:
        return self.body + self.ca_signature

    @classmethod
    def decode(cls, data: bytes) -> "Certificate":
        if len(data) != CERT_SIZE:
            raise MalformedFrame(f"certificate is {CERT_SIZE} bytes, got {len(data)}")
        subject_id, key, issued_at = _CERT_BODY.unpack_from(data)
        return cls(subject_id, key, issued_at, data[_CERT_BODY.size:])


def verify_certificate(root_public_key: bytes, cert: Certificate) -> bool:
    return verify_signature(root_public_key, cert.body, cert.ca_signature)


@dataclass(slots=True)
class Identity:
    subject_id: int
    public_key: bytes
    cert: Certificate
    revoked: bool = False


class CertificateAuthority:
    """Issues certificates at registration and tracks revocations."""

    def __init__(self, *, rng: random.Random | None = None) -> None:
        self._rng = rng
        self._root = KeyPair.generate(rng)
        self._identities: dict[int, Identity] = {}
        self._listeners: list[Callable[[int], None]] = []

    @property
    def root_public_key(self) -> bytes:
        return self._root.public_bytes

    def register(self, subject_id: int, *, now: int = 0) -> tuple[KeyPair, Certificate]:
        if subject_id in self._identities:
            raise DuplicateSubject(f"subject {subject_id} already registered")
        keypair = KeyPair.generate(self._rng)
        body = _CERT_BODY.pack(subject_id, keypair.public_bytes, now)
        cert = Certificate(subject_id, keypair.public_bytes, now, self._root.sign(body))
        self._identities[subject_id] = Identity(subject_id, keypair.public_bytes, cert)
        logger.info("issued certificate for subject %d", subject_id)
        return keypair, cert

    def verify(self, cert: Certificate, data: bytes, signature: bytes) -> bool:
        """Cert chains to this root, is not revoked, and signed ``data``."""
        if not verify_certificate(self.root_public_key, cert):
            return False
        identity = self._identities.get(cert.subject_id)
        if identity is None or identity.revoked or identity.public_key != cert.public_key:
            return False
        return verify_signature(cert.public_key, data, signature)

    def revoke(self, subject_id: int) -> None:
        identity = self._identities.get(subject_id)
        if identity is None:
            raise UnknownSubject(f"subject {subject_id} was never registered")
        if identity.revoked:
            return
        identity.revoked = True
        logger.info("revoked certificate for subject %d", subject_id)
        for listener in list(self._listeners):
            listener(subject_id)

    def is_revoked(self, subject_id: int) -> bool:
        identity = self._identities.get(subject_id)
        return identity is not None and identity.revoked

    def on_revoke(self, callback: Callable[[int], None]) -> None:
        self._listeners.append(callback)

    def identity(self, subject_id: int) -> Identity | None:
        return self._identities.get(subject_id)


@dataclass(frozen=True, slots=True)
class TrustAnchor:
    """What a gateway trusts: the pre-configured CA root and the CSS it pins."""
    root_public_key: bytes
    css_cert: Certificate

    @classmethod
    def pin(cls, root_public_key: bytes, css_cert: Certificate) -> "TrustAnchor":
        if not verify_certificate(root_public_key, css_cert):
            raise ValueError("CSS certificate was not issued by the configured root")
        return cls(root_public_key, css_cert)

    def verify(self, data: bytes, signature: bytes) -> bool:
        return verify_signature(self.css_cert.public_key, data, signature)


# ------------------------------------------------------------------
# Link sealing (optional confidentiality for updates)
# ------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class LinkKey:
    key: bytes = field(repr=False)

    @classmethod
    def generate(cls, rng: random.Random | None = None) -> "LinkKey":
        if rng is None:
            return cls(ChaCha20Poly1305.generate_key())
        return cls(rng.randbytes(KEY_SIZE))


def _nonce(box_id: int, seq: int) -> bytes:
    return _NONCE.pack(box_id, seq)


def seal(link: LinkKey, box_id: int, seq: int, data: bytes, aad: bytes) -> bytes:
    return ChaCha20Poly1305(link.key).encrypt(_nonce(box_id, seq), data, aad)


def open_sealed(link: LinkKey, box_id: int, seq: int, data: bytes, aad: bytes) -> bytes:
    try:
        return ChaCha20Poly1305(link.key).decrypt(_nonce(box_id, seq), data, aad)
    except InvalidTag:
        raise MalformedFrame(f"sealed update {seq} for box {box_id} failed to open") from None
