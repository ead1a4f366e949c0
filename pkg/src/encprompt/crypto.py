"""Signing keys, verification, the trusted-key registry and replay protection.

Public keys travel inside tokens as DER ``SubjectPublicKeyInfo`` so a key is
self-describing; private keys are PKCS#8 DER and never leave key files.
"""

from __future__ import annotations

import enum
import json
import os
import threading
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import dsa, ec, ed25519, padding, rsa

from ._b64 import b64url_decode, b64url_encode
from .errors import KeyFileError, SigningFailure, UnsupportedScheme

# verify() bails out before parsing anything larger than this
MAX_PUBLIC_KEY_BYTES = 2048
MAX_SIGNATURE_BYTES = 1024


class SchemeId(enum.IntEnum):
    """Wire tag of a public-key scheme.

    DH and ECDH are recognised so they can be refused explicitly: they agree
    on keys, they do not sign.
    """

    RSA_PSS_SHA256 = 1
    DSA_SHA256 = 2
    ECDSA_P256_SHA256 = 3
    ED25519 = 4
    DH = 5
    ECDH = 6

    @property
    def label(self) -> str:
        return _LABELS[self]

    @property
    def can_sign(self) -> bool:
        return self in SIGNATURE_SCHEMES

    @classmethod
    def parse(cls, value: Union[str, int, "SchemeId"]) -> "SchemeId":
        if isinstance(value, SchemeId):
            return value
        if isinstance(value, int):
            try:
                return cls(value)
            except ValueError:
                raise UnsupportedScheme(f"unknown scheme tag {value}") from None
        for scheme, label in _LABELS.items():
            if label == value:
                return scheme
        raise UnsupportedScheme(f"unknown scheme {value!r}")


_LABELS = {
    SchemeId.RSA_PSS_SHA256: "rsa-pss-sha256",
    SchemeId.DSA_SHA256: "dsa-sha256",
    SchemeId.ECDSA_P256_SHA256: "ecdsa-p256-sha256",
    SchemeId.ED25519: "ed25519",
    SchemeId.DH: "dh",
    SchemeId.ECDH: "ecdh",
}

SIGNATURE_SCHEMES = frozenset(
    {SchemeId.RSA_PSS_SHA256, SchemeId.DSA_SHA256, SchemeId.ECDSA_P256_SHA256, SchemeId.ED25519}
)

DEFAULT_SCHEME = SchemeId.ECDSA_P256_SHA256

_PSS = padding.PSS(mgf=padding.MGF1(hashes.SHA256()), salt_length=padding.PSS.DIGEST_LENGTH)


@dataclass(frozen=True)
class KeyPair:
    scheme_id: SchemeId
    public_key: bytes
    private_key: bytes = field(repr=False)


def _require_signing(scheme_id) -> SchemeId:
    scheme = SchemeId.parse(scheme_id)
    if not scheme.can_sign:
        raise UnsupportedScheme(f"{scheme.label} is a key-agreement scheme and cannot sign")
    return scheme


def generate_keypair(scheme_id=DEFAULT_SCHEME) -> KeyPair:
    scheme = _require_signing(scheme_id)
    if scheme is SchemeId.RSA_PSS_SHA256:
        private = rsa.generate_private_key(public_exponent=65537, key_size=2048)
    elif scheme is SchemeId.DSA_SHA256:
        private = dsa.generate_private_key(key_size=2048)
    elif scheme is SchemeId.ECDSA_P256_SHA256:
        private = ec.generate_private_key(ec.SECP256R1())
    else:
        private = ed25519.Ed25519PrivateKey.generate()
    return KeyPair(
        scheme_id=scheme,
        public_key=private.public_key().public_bytes(
            serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
        ),
        private_key=private.private_bytes(
            serialization.Encoding.DER,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        ),
    )


def keypair_from_private(scheme_id, private_der: bytes) -> KeyPair:
    scheme = _require_signing(scheme_id)
    private = _load_private(private_der)
    if _scheme_of(private.public_key()) is not scheme:
        raise KeyFileError(f"private key does not belong to scheme {scheme.label}")
    return KeyPair(
        scheme_id=scheme,
        public_key=private.public_key().public_bytes(
            serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
        ),
        private_key=private_der,
    )


@lru_cache(maxsize=64)
def _load_private(der: bytes):
    return serialization.load_der_private_key(der, password=None)


@lru_cache(maxsize=1024)
def _load_public(der: bytes):
    try:
        return serialization.load_der_public_key(der)
    except Exception:
        return None


def _scheme_of(public) -> Optional[SchemeId]:
    if isinstance(public, rsa.RSAPublicKey):
        return SchemeId.RSA_PSS_SHA256
    if isinstance(public, dsa.DSAPublicKey):
        return SchemeId.DSA_SHA256
    if isinstance(public, ec.EllipticCurvePublicKey) and isinstance(public.curve, ec.SECP256R1):
        return SchemeId.ECDSA_P256_SHA256
    if isinstance(public, ed25519.Ed25519PublicKey):
        return SchemeId.ED25519
    return None


def scheme_of_public_key(public_key: bytes) -> Optional[SchemeId]:
    """Scheme implied by a DER public key, or None if unparseable/unsupported."""
    if len(public_key) > MAX_PUBLIC_KEY_BYTES:
        return None
    public = _load_public(bytes(public_key))
    return None if public is None else _scheme_of(public)


def sign(message: bytes, key: KeyPair) -> bytes:
    scheme = _require_signing(key.scheme_id)
    try:
        private = _load_private(key.private_key)
        if scheme is SchemeId.RSA_PSS_SHA256:
            return private.sign(message, _PSS, hashes.SHA256())
        if scheme is SchemeId.DSA_SHA256:
            return private.sign(message, hashes.SHA256())
        if scheme is SchemeId.ECDSA_P256_SHA256:
            return private.sign(message, ec.ECDSA(hashes.SHA256()))
        return private.sign(message)
    except Exception as exc:
        raise SigningFailure(f"{scheme.label}: {exc}") from exc


def verify(message: bytes, signature: bytes, public_key: bytes, scheme_id=None) -> bool:
    """True iff ``signature`` over ``message`` checks out under ``public_key``.

    Never raises. When ``scheme_id`` is given the key must belong to that
    scheme.
    """
    try:
        if not signature or len(signature) > MAX_SIGNATURE_BYTES:
            return False
        if len(public_key) > MAX_PUBLIC_KEY_BYTES:
            return False
        public = _load_public(bytes(public_key))
        if public is None:
            return False
        scheme = _scheme_of(public)
        if scheme is None:
            return False
        if scheme_id is not None and SchemeId.parse(scheme_id) is not scheme:
            return False
        message = bytes(message)
        signature = bytes(signature)
        if scheme is SchemeId.RSA_PSS_SHA256:
            public.verify(signature, message, _PSS, hashes.SHA256())
        elif scheme is SchemeId.DSA_SHA256:
            public.verify(signature, message, hashes.SHA256())
        elif scheme is SchemeId.ECDSA_P256_SHA256:
            public.verify(signature, message, ec.ECDSA(hashes.SHA256()))
        else:
            public.verify(signature, message)
        return True
    except InvalidSignature:
        return False
    except Exception:
        return False


# -- trusted key registry ----------------------------------------------------------


class KeyRegistry:
    """Public keys the server trusts, grouped by permission class."""

    def __init__(self, entries: Iterable[tuple[str, bytes]] = ()):
        self._entries: dict[str, set[bytes]] = {}
        for permission_class, public_key in entries:
            self.register(permission_class, public_key)

    def register(self, permission_class: str, public_key: bytes) -> None:
        self._entries.setdefault(permission_class, set()).add(bytes(public_key))

    def keys_for(self, permission_class: str) -> frozenset[bytes]:
        return frozenset(self._entries.get(permission_class, ()))

    def __len__(self) -> int:
        return sum(len(v) for v in self._entries.values())

    def to_json(self) -> str:
        rows = [
            {"permission_class": cls, "public_key": b64url_encode(pk)}
            for cls in sorted(self._entries)
            for pk in sorted(self._entries[cls])
        ]
        return json.dumps(rows, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "KeyRegistry":
        try:
            rows = json.loads(text)
            if not isinstance(rows, list):
                raise ValueError("registry file must hold a list")
            return cls((row["permission_class"], b64url_decode(row["public_key"])) for row in rows)
        except (ValueError, KeyError, TypeError) as exc:
            raise KeyFileError(f"bad key registry: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "KeyRegistry":
        try:
            return cls.from_json(Path(path).read_text())
        except OSError as exc:
            raise KeyFileError(str(exc)) from None


def check_registered(public_key: bytes, permission_class: str, registry: KeyRegistry) -> bool:
    return bytes(public_key) in registry.keys_for(permission_class)


# -- key files -------------------------------------------------------------------


def write_key_file(path, scheme_id, key: bytes, created_at: Optional[int] = None, private: bool = False) -> None:
    path = Path(path)
    doc = {
        "scheme_id": SchemeId.parse(scheme_id).label,
        "key": b64url_encode(key),
        "created_at": int(time.time() if created_at is None else created_at),
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")
    if private:
        os.chmod(path, 0o600)


def read_key_file(path) -> tuple[SchemeId, bytes, int]:
    try:
        doc = json.loads(Path(path).read_text())
        return SchemeId.parse(doc["scheme_id"]), b64url_decode(doc["key"]), int(doc["created_at"])
    except (OSError, ValueError, KeyError, TypeError, UnsupportedScheme) as exc:
        raise KeyFileError(f"{path}: {exc}") from None


def save_keypair(key: KeyPair, directory, stem: str) -> tuple[Path, Path]:
    """Write ``<stem>.key.json`` (private, mode 600) and ``<stem>.pub.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    now = int(time.time())
    priv = directory / f"{stem}.key.json"
    pub = directory / f"{stem}.pub.json"
    write_key_file(priv, key.scheme_id, key.private_key, now, private=True)
    write_key_file(pub, key.scheme_id, key.public_key, now)
    return priv, pub


def load_keypair(path) -> KeyPair:
    scheme, der, _ = read_key_file(path)
    try:
        return keypair_from_private(scheme, der)
    except ValueError as exc:
        raise KeyFileError(f"{path}: {exc}") from None


# -- replay protection -----------------------------------------------------------


class NonceCache:
    """Remembers nonces until ``expires_at + horizon``.

    With a ``path`` the cache is journaled as JSON lines, one record per
    accepted nonce, so a restarted process keeps refusing replays. The
    journal is compacted when opened, using ``clock`` to decide what has
    aged out.
    """

    def __init__(self, horizon: int = 300, path=None, durable: bool = True, clock=time.time):
        if horizon < 0:
            raise ValueError("horizon must be >= 0")
        self.horizon = horizon
        self.path = Path(path) if path is not None else None
        self.durable = durable
        self.clock = clock
        self._seen: dict[bytes, int] = {}
        self._lock = threading.Lock()
        self._journal = None
        self._checks = 0
        if self.path is not None:
            self._load_and_compact()

    def _load_and_compact(self) -> None:
        now = self.clock()
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                try:
                    rec = json.loads(line)
                    nonce, exp = b64url_decode(rec["nonce"]), int(rec["expires_at"])
                except (ValueError, KeyError, TypeError):
                    # torn final write
                    continue
                if exp + self.horizon > now:
                    self._seen[nonce] = max(exp, self._seen.get(nonce, exp))
        tmp = self.path.with_name(self.path.name + ".tmp")
        with open(tmp, "w") as fh:
            for nonce, exp in self._seen.items():
                fh.write(self._record(nonce, exp))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.path)
        self._journal = open(self.path, "a")

    @staticmethod
    def _record(nonce: bytes, expires_at: int) -> str:
        return json.dumps({"nonce": b64url_encode(nonce), "expires_at": int(expires_at)}) + "\n"

    def __len__(self) -> int:
        return len(self._seen)

    def __contains__(self, nonce: bytes) -> bool:
        return nonce in self._seen

    def _purge(self, now: float) -> None:
        dead = [n for n, exp in self._seen.items() if exp + self.horizon <= now]
        for n in dead:
            del self._seen[n]

    def check_and_record(self, nonce: bytes, expires_at: int, now: Optional[float] = None) -> bool:
        now = self.clock() if now is None else now
        nonce = bytes(nonce)
        with self._lock:
            self._checks += 1
            if self._checks % 1024 == 0:
                self._purge(now)
            exp = self._seen.get(nonce)
            if exp is not None and exp + self.horizon > now:
                return False
            self._seen[nonce] = int(expires_at)
            if self._journal is not None:
                self._journal.write(self._record(nonce, expires_at))
                self._journal.flush()
                if self.durable:
                    os.fsync(self._journal.fileno())
            return True

    def close(self) -> None:
        with self._lock:
            if self._journal is not None:
                self._journal.close()
                self._journal = None


def check_and_record_nonce(nonce: bytes, expires_at: int, cache: NonceCache, now: Optional[float] = None) -> bool:
    return cache.check_and_record(nonce, expires_at, now)
