"""Length-prefixed binary framing.

Frame layout: u32 BE body length, u8 version (=1), u8 msg_type, body.
The length counts only the body, so the full frame is length + 6 bytes.
Body length is capped at 64 MiB; anything larger, an unknown version,
or a short read raises ProtocolError.
"""

from __future__ import annotations

import asyncio
import struct

VERSION = 1
MAX_BODY = 64 * 1024 * 1024
HEADER = struct.Struct(">IBB")


class ProtocolError(Exception):
    """Malformed frame or message; the connection should be dropped."""


def encode_frame(msg_type: int, body: bytes) -> bytes:
    if len(body) > MAX_BODY:
        raise ProtocolError(f"body of {len(body)} bytes exceeds 64 MiB cap")
    if not 0 <= msg_type <= 255:
        raise ProtocolError(f"bad msg_type {msg_type}")
    return HEADER.pack(len(body), VERSION, msg_type) + body


def decode_frame(buf: bytes) -> tuple[int, bytes]:
    """Parse one complete frame; returns (msg_type, body)."""
    if len(buf) < HEADER.size:
        raise ProtocolError("frame shorter than header")
    length, version, msg_type = HEADER.unpack_from(buf)
    if version != VERSION:
        raise ProtocolError(f"unknown protocol version {version}")
    if length > MAX_BODY:
        raise ProtocolError(f"declared body of {length} bytes exceeds 64 MiB cap")
    if len(buf) != HEADER.size + length:
        raise ProtocolError("frame length mismatch")
    return msg_type, buf[HEADER.size:]


async def read_frame(reader: asyncio.StreamReader) -> tuple[int, bytes]:
    """Read one frame from a stream; EOF at a frame boundary raises
    asyncio.IncompleteReadError with empty partial."""
    header = await reader.readexactly(HEADER.size)
    length, version, msg_type = HEADER.unpack(header)
    if version != VERSION:
        raise ProtocolError(f"unknown protocol version {version}")
    if length > MAX_BODY:
        raise ProtocolError(f"declared body of {length} bytes exceeds 64 MiB cap")
    body = await reader.readexactly(length) if length else b""
    return msg_type, body
