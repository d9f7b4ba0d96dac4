"""Write-ahead operation log: one record per committed state change.

A record is durable (fsynced) before the in-memory state it describes
is applied; replaying the log over the last snapshot reproduces every
committed operation.  Record layout: u32 BE length, payload, u32 BE
CRC-32 of the payload; payload = u8 record type + body.  A crash can
only tear the final record, which replay detects and truncates away.

Record types:
  ROLLOVER  a new table generation with its parameter seeds
  UPLOAD    a committed ciphertext upload (digests + owner + size)
  GRANT     key access gained via a completed exchange (or re-upload)
  REVOKE    access reverted after a post-completion auth failure
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass

MAGIC = b"SLSHLOG1"
MAX_RECORD = 1 << 20

T_ROLLOVER = 1
T_UPLOAD = 2
T_GRANT = 3
T_REVOKE = 4


class LogError(Exception):
    pass


@dataclass(frozen=True)
class Rollover:
    generation_id: int
    seeds: tuple  # of 32-byte seeds, one per table


@dataclass(frozen=True)
class Upload:
    image_ref: bytes
    generation_id: int
    user_id: str
    size: int
    digests: tuple  # of 32-byte digests, one per table


@dataclass(frozen=True)
class Grant:
    """count is served_by's exchange total AFTER this grant; replay sets
    it absolutely, which keeps re-replay over a snapshot idempotent."""

    image_ref: bytes
    user_id: str
    served_by: str = ""  # exchange server; empty for idempotent re-upload
    count: int = 0


@dataclass(frozen=True)
class Revoke:
    image_ref: bytes
    user_id: str
    served_by: str = ""
    count: int = 0


Record = Rollover | Upload | Grant | Revoke


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(">H", len(raw)) + raw


def _unpack_str(buf: bytes, pos: int) -> tuple[str, int]:
    (n,) = struct.unpack_from(">H", buf, pos)
    pos += 2
    return buf[pos:pos + n].decode("utf-8"), pos + n


def encode_record(rec: Record) -> bytes:
    if isinstance(rec, Rollover):
        body = struct.pack(">IH", rec.generation_id, len(rec.seeds))
        body += b"".join(rec.seeds)
        payload = bytes([T_ROLLOVER]) + body
    elif isinstance(rec, Upload):
        body = (rec.image_ref + struct.pack(">I", rec.generation_id)
                + _pack_str(rec.user_id) + struct.pack(">Q", rec.size)
                + struct.pack(">H", len(rec.digests)) + b"".join(rec.digests))
        payload = bytes([T_UPLOAD]) + body
    elif isinstance(rec, Grant):
        payload = (bytes([T_GRANT]) + rec.image_ref + _pack_str(rec.user_id)
                   + _pack_str(rec.served_by) + struct.pack(">I", rec.count))
    elif isinstance(rec, Revoke):
        payload = (bytes([T_REVOKE]) + rec.image_ref + _pack_str(rec.user_id)
                   + _pack_str(rec.served_by) + struct.pack(">I", rec.count))
    else:
        raise LogError(f"unknown record {rec!r}")
    return (struct.pack(">I", len(payload)) + payload
            + struct.pack(">I", zlib.crc32(payload)))


def decode_payload(payload: bytes) -> Record:
    rtype, body = payload[0], payload[1:]
    if rtype == T_ROLLOVER:
        gen_id, t = struct.unpack_from(">IH", body)
        seeds = tuple(body[6 + 32 * i: 6 + 32 * (i + 1)] for i in range(t))
        if any(len(s) != 32 for s in seeds):
            raise LogError("rollover record truncated")
        return Rollover(generation_id=gen_id, seeds=seeds)
    if rtype == T_UPLOAD:
        ref = body[:32]
        (gen_id,) = struct.unpack_from(">I", body, 32)
        user, pos = _unpack_str(body, 36)
        (size,) = struct.unpack_from(">Q", body, pos)
        pos += 8
        (t,) = struct.unpack_from(">H", body, pos)
        pos += 2
        digests = tuple(body[pos + 32 * i: pos + 32 * (i + 1)] for i in range(t))
        if len(ref) != 32 or any(len(d) != 32 for d in digests):
            raise LogError("upload record truncated")
        return Upload(image_ref=ref, generation_id=gen_id, user_id=user,
                      size=size, digests=digests)
    if rtype in (T_GRANT, T_REVOKE):
        ref = body[:32]
        user, pos = _unpack_str(body, 32)
        served, pos = _unpack_str(body, pos)
        (count,) = struct.unpack_from(">I", body, pos)
        cls = Grant if rtype == T_GRANT else Revoke
        return cls(image_ref=ref, user_id=user, served_by=served, count=count)
    raise LogError(f"unknown record type {rtype}")


class OpLog:
    """Append-only log handle; appends are flushed and fsynced."""

    def __init__(self, path: str) -> None:
        self.path = path
        if not os.path.exists(path):
            with open(path, "wb") as f:
                f.write(MAGIC)
                f.flush()
                os.fsync(f.fileno())
        self._f = open(path, "ab")

    def append(self, rec: Record) -> None:
        self.append_many([rec])

    def append_many(self, recs: list[Record]) -> None:
        # One write + one fsync: either all records land or, on a torn
        # tail, replay drops from the first damaged record onward.
        buf = b"".join(encode_record(r) for r in recs)
        self._f.write(buf)
        self._f.flush()
        os.fsync(self._f.fileno())

    def close(self) -> None:
        self._f.close()

    def reset(self) -> None:
        """Truncate to an empty log (after a snapshot subsumed it)."""
        self._f.close()
        with open(self.path, "wb") as f:
            f.write(MAGIC)
            f.flush()
            os.fsync(f.fileno())
        self._f = open(self.path, "ab")


def replay_and_repair(path: str) -> list[Record]:
    """Read all intact records; truncate the file after the last one.

    A missing file replays as empty (and is not created).  A bad magic
    header raises - that is corruption, not a torn append.
    """
    if not os.path.exists(path):
        return []
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:len(MAGIC)] != MAGIC:
        raise LogError(f"{path}: bad log magic")
    records: list[Record] = []
    pos = len(MAGIC)
    clean_end = pos
    while pos + 4 <= len(buf):
        (length,) = struct.unpack_from(">I", buf, pos)
        if length == 0 or length > MAX_RECORD or pos + 4 + length + 4 > len(buf):
            break  # torn tail
        payload = buf[pos + 4: pos + 4 + length]
        (crc,) = struct.unpack_from(">I", buf, pos + 4 + length)
        if zlib.crc32(payload) != crc:
            break
        try:
            records.append(decode_payload(payload))
        except (LogError, struct.error, UnicodeDecodeError):
            break
        pos += 4 + length + 4
        clean_end = pos
    if clean_end != len(buf):
        with open(path, "r+b") as f:
            f.truncate(clean_end)
            f.flush()
            os.fsync(f.fileno())
    return records
