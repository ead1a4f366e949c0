"""Wire format of the permission token appended to a user prompt.

A token looks like::

    <D>{base64url(payload)}.{base64url(signature)}</D>

with unpadded base64url and an empty signature segment for on-device tokens.
The payload is a fixed-order binary record; every variable-length field is
length-prefixed so distinct payloads never share an encoding.

Payload layout (big-endian)::

    u8  version              (1)
    u8  mode                 (1 = server verified, 2 = on device)
    u8  permission tag       (1 = level, 2 = capabilities, 3 = graph)
        level:        u32 value
        capabilities: u16 bit count, packed bits MSB first, zero padding
        graph:        u16 length, UTF-8 graph id
    -- server verified only --
    u8  scheme tag
    u16 public key length, DER public key
    --
    32  prompt hash (SHA-256 of the UTF-8 prompt)
    16  nonce
    u64 issued_at
    u64 expires_at
"""

from __future__ import annotations

import enum
import hashlib
import re
import struct
from dataclasses import dataclass
from typing import Optional

from ._b64 import b64url_decode, b64url_encode
from .crypto import SchemeId
from .errors import InvalidPayload, InvalidSignatureLength, MalformedPayload
from .policy import Capabilities, Level, Permission, Sequential

OPEN = "<D>"
CLOSE = "</D>"
FORMAT_VERSION = 1
PROMPT_HASH_LEN = 32
NONCE_LEN = 16

_TAG_LEVEL, _TAG_CAPS, _TAG_GRAPH = 1, 2, 3
_INTERIOR = re.compile(r"[A-Za-z0-9_-]+\.[A-Za-z0-9_-]*")


class Mode(enum.IntEnum):
    SERVER_VERIFIED = 1
    ON_DEVICE = 2


def prompt_digest(user_prompt: str) -> bytes:
    return hashlib.sha256(user_prompt.encode("utf-8")).digest()


@dataclass(frozen=True)
class TokenPayload:
    mode: Mode
    permission: Permission
    prompt_hash: bytes
    nonce: bytes
    issued_at: int
    expires_at: int
    public_key: Optional[bytes] = None
    scheme_id: Optional[SchemeId] = None
    version: int = FORMAT_VERSION

    def problems(self) -> list[str]:
        out = []
        if self.version != FORMAT_VERSION:
            out.append(f"unsupported version {self.version}")
        if not isinstance(self.mode, Mode):
            out.append(f"bad mode {self.mode!r}")
        if not isinstance(self.permission, (Level, Capabilities, Sequential)):
            out.append(f"bad permission {self.permission!r}")
        elif isinstance(self.permission, Level) and self.permission.value >= 2**32:
            out.append("level does not fit in 32 bits")
        elif isinstance(self.permission, Capabilities) and len(self.permission.bits) >= 2**16:
            out.append("too many capability bits")
        elif isinstance(self.permission, Sequential) and len(self.permission.graph_id.encode("utf-8")) >= 2**16:
            out.append("graph id too long")
        if self.mode is Mode.ON_DEVICE:
            if self.public_key is not None or self.scheme_id is not None:
                out.append("on-device payloads carry no public key or scheme")
        elif self.mode is Mode.SERVER_VERIFIED:
            if not isinstance(self.scheme_id, SchemeId):
                out.append("server-verified payload needs a scheme id")
            if not isinstance(self.public_key, (bytes, bytearray)) or not self.public_key:
                out.append("server-verified payload needs a public key")
            elif len(self.public_key) >= 2**16:
                out.append("public key too long")
        if not isinstance(self.prompt_hash, bytes) or len(self.prompt_hash) != PROMPT_HASH_LEN:
            out.append(f"prompt_hash must be {PROMPT_HASH_LEN} bytes")
        if not isinstance(self.nonce, bytes) or len(self.nonce) != NONCE_LEN:
            out.append(f"nonce must be {NONCE_LEN} bytes")
        for name in ("issued_at", "expires_at"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v < 2**64:
                out.append(f"{name} must be an unsigned 64-bit integer")
        if not out and self.expires_at <= self.issued_at:
            out.append("expires_at must be after issued_at")
        return out


def _encode_permission(p: Permission) -> bytes:
    if isinstance(p, Level):
        return struct.pack(">BI", _TAG_LEVEL, p.value)
    if isinstance(p, Capabilities):
        n = len(p.bits)
        packed = bytearray((n + 7) // 8)
        for i, bit in enumerate(p.bits):
            if bit:
                packed[i // 8] |= 0x80 >> (i % 8)
        return struct.pack(">BH", _TAG_CAPS, n) + bytes(packed)
    raw = p.graph_id.encode("utf-8")
    return struct.pack(">BH", _TAG_GRAPH, len(raw)) + raw


def encode_payload(payload: TokenPayload) -> bytes:
    problems = payload.problems()
    if problems:
        raise InvalidPayload("; ".join(problems))
    parts = [struct.pack(">BB", payload.version, payload.mode), _encode_permission(payload.permission)]
    if payload.mode is Mode.SERVER_VERIFIED:
        pk = bytes(payload.public_key)
        parts.append(struct.pack(">BH", payload.scheme_id, len(pk)) + pk)
    parts.append(payload.prompt_hash)
    parts.append(payload.nonce)
    parts.append(struct.pack(">QQ", payload.issued_at, payload.expires_at))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedPayload("truncated payload")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_payload(data: bytes) -> TokenPayload:
    data = bytes(data)
    r = _Reader(data)
    version, mode_tag = r.unpack(">BB")
    if version != FORMAT_VERSION:
        raise MalformedPayload(f"unknown version {version}")
    try:
        mode = Mode(mode_tag)
    except ValueError:
        raise MalformedPayload(f"unknown mode {mode_tag}") from None

    (tag,) = r.unpack(">B")
    try:
        if tag == _TAG_LEVEL:
            (value,) = r.unpack(">I")
            permission: Permission = Level(value)
        elif tag == _TAG_CAPS:
            (n,) = r.unpack(">H")
            packed = r.take((n + 7) // 8)
            bits = tuple(bool(packed[i // 8] & (0x80 >> (i % 8))) for i in range(n))
            permission = Capabilities(bits)
        elif tag == _TAG_GRAPH:
            (n,) = r.unpack(">H")
            permission = Sequential(r.take(n).decode("utf-8"))
        else:
            raise MalformedPayload(f"unknown permission tag {tag}")
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedPayload(f"bad permission: {exc}") from None

    public_key = scheme_id = None
    if mode is Mode.SERVER_VERIFIED:
        scheme_tag, n = r.unpack(">BH")
        try:
            scheme_id = SchemeId(scheme_tag)
        except ValueError:
            raise MalformedPayload(f"unknown scheme tag {scheme_tag}") from None
        public_key = r.take(n)

    prompt_hash = r.take(PROMPT_HASH_LEN)
    nonce = r.take(NONCE_LEN)
    issued_at, expires_at = r.unpack(">QQ")
    if r.pos != len(data):
        raise MalformedPayload(f"{len(data) - r.pos} trailing bytes")

    payload = TokenPayload(
        mode=mode,
        permission=permission,
        prompt_hash=prompt_hash,
        nonce=nonce,
        issued_at=issued_at,
        expires_at=expires_at,
        public_key=public_key,
        scheme_id=scheme_id,
        version=version,
    )
    problems = payload.problems()
    if problems:
        raise MalformedPayload("; ".join(problems))
    # catches non-zero capability padding and any other non-canonical form
    if encode_payload(payload) != data:
        raise MalformedPayload("non-canonical encoding")
    return payload


@dataclass(frozen=True)
class EncodedToken:
    text: str

    def segments(self) -> tuple[str, str]:
        inner = self.text[len(OPEN) : -len(CLOSE)]
        payload_seg, _, sig_seg = inner.partition(".")
        return payload_seg, sig_seg

    def payload_bytes(self) -> bytes:
        try:
            return b64url_decode(self.segments()[0])
        except ValueError as exc:
            raise MalformedPayload(f"payload segment: {exc}") from None

    def signature(self) -> bytes:
        try:
            return b64url_decode(self.segments()[1])
        except ValueError as exc:
            raise MalformedPayload(f"signature segment: {exc}") from None

    def decode(self) -> tuple[TokenPayload, bytes]:
        """Return ``(payload, signature)``; raises MalformedPayload."""
        return decode_payload(self.payload_bytes()), self.signature()


def render_token(payload: TokenPayload, signature: bytes = b"") -> EncodedToken:
    if payload.mode is Mode.ON_DEVICE and signature:
        raise InvalidSignatureLength("on-device tokens are unsigned")
    if payload.mode is Mode.SERVER_VERIFIED and not signature:
        raise InvalidSignatureLength("server-verified tokens need a signature")
    body = b64url_encode(encode_payload(payload)) + "." + b64url_encode(signature)
    return EncodedToken(OPEN + body + CLOSE)


@dataclass(frozen=True)
class ParsedInput:
    user_prompt: str
    token: Optional[EncodedToken] = None
    suspicious_delimiters: bool = False


def extract(user_input: str) -> ParsedInput:
    """Split a user input into the prompt and its trailing token.

    Only a well-formed block at the very end counts as a token. Delimiters
    anywhere else stay in the prompt as plain text and set
    ``suspicious_delimiters``.
    """
    token = None
    prompt = user_input
    if user_input.endswith(CLOSE):
        start = user_input.rfind(OPEN, 0, len(user_input) - len(CLOSE))
        if start != -1 and _INTERIOR.fullmatch(user_input, start + len(OPEN), len(user_input) - len(CLOSE)):
            token = EncodedToken(user_input[start:])
            prompt = user_input[:start]
    suspicious = OPEN in prompt or CLOSE in prompt
    return ParsedInput(user_prompt=prompt, token=token, suspicious_delimiters=suspicious)
