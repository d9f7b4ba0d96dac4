"""Protocol messages: the tagged union carried inside frames.

Every variant has a fixed msg_type byte and a fixed big-endian field
order (see PROTOCOL.md for the byte-level layouts).  decode() is the
single entry point; it dispatches on msg_type and re-encodes to the
exact input bytes, which the server relies on when relaying exchange
messages opaquely.

Exchange-scoped messages all carry the 16-byte exchange_id issued by
the server in DEDUP_RESULT.  ABORT uses an all-zeros exchange_id for
connection-scoped failures (rate limit, malformed frame, bad token).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from ..slsh import PARAMS_WIRE_LEN, SEED_LEN, SlshDigest
from .frames import ProtocolError

EXCHANGE_ID_LEN = 16
UPLOAD_REF_LEN = 16
TOKEN_LEN = 16
IMAGE_REF_LEN = 32
DIGEST_LEN = 32
NO_EXCHANGE = b"\x00" * EXCHANGE_ID_LEN

MAX_USER_ID = 255


class Reason(enum.IntEnum):
    TIMEOUT = 0
    BAD_TOKEN = 1
    RATE_LIMITED = 2
    MALFORMED = 3
    AUTH_FAILURE = 4
    PEER_ABORTED = 5
    QUOTA_EXCEEDED = 6


class SenderRole(enum.IntEnum):
    UPLOADER = 0  # PAKE role A in both sessions
    HOLDER = 1    # PAKE role B in both sessions


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if not 1 <= len(raw) <= MAX_USER_ID:
        raise ProtocolError(f"string field must be 1..{MAX_USER_ID} utf-8 bytes")
    return struct.pack(">H", len(raw)) + raw


def _check_exch(exchange_id: bytes) -> bytes:
    if len(exchange_id) != EXCHANGE_ID_LEN:
        raise ProtocolError("exchange_id must be 16 bytes")
    return exchange_id


class _Cursor:
    """Sequential reader over a message body; over/underruns raise."""

    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ProtocolError("message body truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def string(self) -> str:
        n = self.u16()
        if not 1 <= n <= MAX_USER_ID:
            raise ProtocolError("string field length out of range")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ProtocolError("string field is not valid utf-8") from e

    def rest(self) -> bytes:
        out = self.buf[self.pos:]
        self.pos = len(self.buf)
        return out

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise ProtocolError(
                f"{len(self.buf) - self.pos} trailing bytes in message body"
            )


# ----------------------------------------------------------- the union

@dataclass(frozen=True)
class Hello:
    """Binds a bearer user_id to the connection; serve=1 registers the
    connection to receive EXCHANGE_OPEN requests."""

    TYPE = 1
    user_id: str
    serve: bool = False

    def encode_body(self) -> bytes:
        return _pack_str(self.user_id) + bytes([1 if self.serve else 0])

    @classmethod
    def decode_body(cls, cur: _Cursor) -> "Hello":
        user = cur.string()
        serve = cur.u8()
        if serve not in (0, 1):
            raise ProtocolError("serve flag must be 0 or 1")
        return cls(user_id=user, serve=bool(serve))


@dataclass(frozen=True)
class GetParams:
    TYPE = 2

    def encode_body(self) -> bytes:
        return b""

    @classmethod
    def decode_body(cls, cur: _Cursor) -> "GetParams":
        return cls()


@dataclass(frozen=True)
class Params:
    """All live generations' LSH parameters, oldest first."""

    TYPE = 3
    generations: tuple  # of (generation_id, tuple of params wire bytes)

    def encode_body(self) -> bytes:
        out = [struct.pack(">I", len(self.generations))]
        for gen_id, params in self.generations:
            out.append(struct.pack(">IH", gen_id, len(params)))
            for p in params:
                if len(p) != PARAMS_WIRE_LEN:
                    raise ProtocolError("bad params encoding length")
                out.append(p)
        return b"".join(out)

    @classmethod
    def decode_body(cls, cur: _Cursor) -> "Params":
        n_gens = cur.u32()
        if n_gens > 4096:
            raise ProtocolError("implausible generation count")
        gens = []
        for _ in range(n_gens):
            gen_id = cur.u32()
            t = cur.u16()
            if not 1 <= t <= 64:
                raise ProtocolError("table count out of range")
            gens.append((gen_id, tuple(cur.take(PARAMS_WIRE_LEN) for _ in range(t))))
        return cls(generations=tuple(gens))


@dataclass(frozen=True)
class UploadHashes:
    """Dedup query: per-generation SLSH digests of one image."""

    TYPE = 4
    user_id: str
    upload_ref: bytes
    digest_sets: tuple  # of (generation_id, tuple of 32-byte digests)

    def encode_body(self) -> bytes:
        if len(self.upload_ref) != UPLOAD_REF_LEN:
            raise ProtocolError("upload_ref must be 16 bytes")
        out = [_pack_str(self.user_id), self.upload_ref,
               struct.pack(">I", len(self.digest_sets))]
        for gen_id, digests in self.digest_sets:
            out.append(struct.pack(">IH", gen_id, len(digests)))
            for d in digests:
                raw = d.digest if isinstance(d, SlshDigest) else d
                if len(raw) != DIGEST_LEN:
                    raise ProtocolError("digest must be 32 bytes")
                out.append(raw)
        return b"".join(out)

    @classmethod
    def decode_body(cls, cur: _Cursor) -> "UploadHashes":
        user = cur.string()
        ref = cur.take(UPLOAD_REF_LEN)
        n_gens = cur.u32()
        if n_gens > 4096:
            raise ProtocolError("implausible generation count")
        sets = []
        for _ in range(n_gens):
            gen_id = cur.u32()
            t = cur.u16()
            if not 1 <= t <= 64:
                raise ProtocolError("table count out of range")
            sets.append((gen_id, tuple(cur.take(DIGEST_LEN) for _ in range(t))))
        return cls(user_id=user, upload_ref=ref, digest_sets=tuple(sets))


@dataclass(frozen=True)
class DedupResult:
    """Server verdict on UPLOAD_HASHES.

    kind 0 (unique): upload_token authorizes one UPLOAD_CT.
    kind 1 (duplicate): exchange_id opens the key exchange for image_ref;
    peer_role_hint names the PAKE role this client must take.
    """

    TYPE = 5
    KIND_UNIQUE = 0
    KIND_DUPLICATE = 1

    kind: int
    upload_token: bytes = b""
    exchange_id: bytes = b""
    image_ref: bytes = b""
    peer_role_hint: int = 0
    collisions: int = 0

    def encode_body(self) -> bytes:
        if self.kind == self.KIND_UNIQUE:
            if len(self.upload_token) != TOKEN_LEN:
                raise ProtocolError("upload_token must be 16 bytes")
            return bytes([self.kind]) + self.upload_token
        if self.kind == self.KIND_DUPLICATE:
            if len(self.exchange_id) != EXCHANGE_ID_LEN:
                raise ProtocolError("exchange_id must be 16 bytes")
            if len(self.image_ref) != IMAGE_REF_LEN:
                raise ProtocolError("image_ref must be 32 bytes")
            return (bytes([self.kind]) + self.exchange_id + self.image_ref
                    + struct.pack(">BH", self.peer_role_hint, self.collisions))
        raise ProtocolError(f"bad dedup result kind {self.kind}")

    @classmethod
    def decode_body(cls, cur: _Cursor) -> "DedupResult":
        kind = cur.u8()
        if kind == cls.KIND_UNIQUE:
            return cls(kind=kind, upload_token=cur.take(TOKEN_LEN))
        if kind == cls.KIND_DUPLICATE:
            exch = cur.take(EXCHANGE_ID_LEN)
            ref = cur.take(IMAGE_REF_LEN)
            hint, collisions = struct.unpack(">BH", cur.take(3))
            if hint not in (0, 1):
                raise ProtocolError("bad role hint")
            return cls(kind=kind, exchange_id=exch, image_ref=ref,
                       peer_role_hint=hint, collisions=collisions)
        raise ProtocolError(f"bad dedup result kind {kind}")


@dataclass(frozen=True)
class UploadCt:
    TYPE = 6
    upload_token: bytes
    ciphertext: bytes = field(repr=False)

    def encode_body(self) -> bytes:
        if len(self.upload_token) != TOKEN_LEN:
            raise ProtocolError("upload_token must be 16 bytes")
        return self.upload_token + self.ciphertext

    @classmethod
    def decode_body(cls, cur: _Cursor) -> "UploadCt":
        return cls(upload_token=cur.take(TOKEN_LEN), ciphertext=cur.rest())


@dataclass(frozen=True)
class ExchangeOpen:
    """Server -> holder: a new uploader wants the key for image_ref."""

    TYPE = 7
    exchange_id: bytes
    image_ref: bytes

    def encode_body(self) -> bytes:
        if len(self.image_ref) != IMAGE_REF_LEN:
            raise ProtocolError("image_ref must be 32 bytes")
        return _check_exch(self.exchange_id) + self.image_ref

    @classmethod
    def decode_body(cls, cur: _Cursor) -> "ExchangeOpen":
        return cls(exchange_id=cur.take(EXCHANGE_ID_LEN),
                   image_ref=cur.take(IMAGE_REF_LEN))


@dataclass(frozen=True)
class SlshParamShare:
    """One party's half of the fresh-parameter agreement."""

    TYPE = 8
    exchange_id: bytes
    sender_role: int
    seed: bytes
    dim: int
    h: int

    def encode_body(self) -> bytes:
        if len(self.seed) != SEED_LEN:
            raise ProtocolError("seed must be 32 bytes")
        if self.sender_role not in (0, 1):
            raise ProtocolError("bad sender_role")
        return (_check_exch(self.exchange_id) + bytes([self.sender_role]) + self.seed
                + struct.pack(">II", self.dim, self.h))

    @classmethod
    def decode_body(cls, cur: _Cursor) -> "SlshParamShare":
        exch = cur.take(EXCHANGE_ID_LEN)
        role = cur.u8()
        if role not in (0, 1):
            raise ProtocolError("bad sender_role")
        seed = cur.take(SEED_LEN)
        dim, h = struct.unpack(">II", cur.take(8))
        return cls(exchange_id=exch, sender_role=role, seed=seed, dim=dim, h=h)


@dataclass(frozen=True)
class PakeMsg:
    """Opaque group element; the server relays it without parsing."""

    TYPE = 9
    exchange_id: bytes
    session_index: int  # 1 or 2
    element: bytes = field(repr=False)

    def encode_body(self) -> bytes:
        if self.session_index not in (1, 2):
            raise ProtocolError("session_index must be 1 or 2")
        return _check_exch(self.exchange_id) + bytes([self.session_index]) + self.element

    @classmethod
    def decode_body(cls, cur: _Cursor) -> "PakeMsg":
        exch = cur.take(EXCHANGE_ID_LEN)
        idx = cur.u8()
        if idx not in (1, 2):
            raise ProtocolError("session_index must be 1 or 2")
        return cls(exchange_id=exch, session_index=idx, element=cur.rest())


@dataclass(frozen=True)
class WrappedKey:
    TYPE = 10
    exchange_id: bytes
    wrapped: bytes = field(repr=False)

    def encode_body(self) -> bytes:
        return _check_exch(self.exchange_id) + self.wrapped

    @classmethod
    def decode_body(cls, cur: _Cursor) -> "WrappedKey":
        return cls(exchange_id=cur.take(EXCHANGE_ID_LEN), wrapped=cur.rest())


@dataclass(frozen=True)
class FetchCt:
    TYPE = 11
    image_ref: bytes

    def encode_body(self) -> bytes:
        if len(self.image_ref) != IMAGE_REF_LEN:
            raise ProtocolError("image_ref must be 32 bytes")
        return self.image_ref

    @classmethod
    def decode_body(cls, cur: _Cursor) -> "FetchCt":
        return cls(image_ref=cur.take(IMAGE_REF_LEN))


@dataclass(frozen=True)
class Ct:
    TYPE = 12
    ciphertext: bytes = field(repr=False)

    def encode_body(self) -> bytes:
        return self.ciphertext

    @classmethod
    def decode_body(cls, cur: _Cursor) -> "Ct":
        return cls(ciphertext=cur.rest())


@dataclass(frozen=True)
class Abort:
    TYPE = 13
    reason: Reason
    exchange_id: bytes = NO_EXCHANGE

    def encode_body(self) -> bytes:
        return bytes([int(self.reason)]) + _check_exch(self.exchange_id)

    @classmethod
    def decode_body(cls, cur: _Cursor) -> "Abort":
        code = cur.u8()
        try:
            reason = Reason(code)
        except ValueError as e:
            raise ProtocolError(f"unknown abort reason {code}") from e
        return cls(reason=reason, exchange_id=cur.take(EXCHANGE_ID_LEN))


@dataclass(frozen=True)
class Ack:
    """Generic acknowledgement; upload ACKs carry the image_ref."""

    TYPE = 14
    payload: bytes = b""

    def encode_body(self) -> bytes:
        return self.payload

    @classmethod
    def decode_body(cls, cur: _Cursor) -> "Ack":
        return cls(payload=cur.rest())


MESSAGE_TYPES = (Hello, GetParams, Params, UploadHashes, DedupResult,
                 UploadCt, ExchangeOpen, SlshParamShare, PakeMsg,
                 WrappedKey, FetchCt, Ct, Abort, Ack)
_BY_TYPE = {cls.TYPE: cls for cls in MESSAGE_TYPES}
assert len(_BY_TYPE) == len(MESSAGE_TYPES)

Message = (Hello | GetParams | Params | UploadHashes | DedupResult
           | UploadCt | ExchangeOpen | SlshParamShare | PakeMsg
           | WrappedKey | FetchCt | Ct | Abort | Ack)


def encode(msg) -> tuple[int, bytes]:
    """Returns (msg_type, body) for framing."""
    return msg.TYPE, msg.encode_body()


def decode(msg_type: int, body: bytes):
    cls = _BY_TYPE.get(msg_type)
    if cls is None:
        raise ProtocolError(f"unknown message type {msg_type}")
    cur = _Cursor(body)
    msg = cls.decode_body(cur)
    cur.done()
    return msg
