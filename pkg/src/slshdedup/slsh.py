"""Secure locality-sensitive hashing.

Random-hyperplane LSH over feature vectors composed with SHA-256.  The
hyperplanes are derived from a 256-bit seed through a portable,
fully-specified PRNG (counter-mode SHA-256 expansion feeding Box-Muller),
so every party that knows the seed reconstructs bit-identical planes.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass, field

import numpy as np

from .features import DimMismatch, FeatureVector

DIGEST_TAG = b"SLSH-v1"
PARAM_ID_TAG = b"SLSH-params"

PARAM_ID_LEN = 16
SEED_LEN = 32
PARAMS_WIRE_LEN = PARAM_ID_LEN + 4 + 4 + SEED_LEN


class SlshError(Exception):
    """Base class for hashing failures."""


class BadDimensions(SlshError):
    """dim or bit-count outside the supported range."""


class MalformedParams(SlshError):
    """Wire-encoded parameters are truncated or inconsistent."""


@dataclass(frozen=True)
class LshParams:
    """One table's hyperplane set, reconstructible from (seed, dim, bits)."""

    param_id: bytes
    dim: int
    bits: int
    seed: bytes
    planes: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        self.planes.setflags(write=False)


@dataclass(frozen=True)
class LshBits:
    """Sign pattern of plane dot products, packed MSB-first."""

    bits: int
    packed: bytes

    def as_bools(self) -> np.ndarray:
        flat = np.unpackbits(np.frombuffer(self.packed, dtype=np.uint8))
        return flat[: self.bits].astype(bool)


@dataclass(frozen=True)
class SlshDigest:
    """256-bit digest of a sign pattern under one parameter set."""

    digest: bytes

    def __post_init__(self) -> None:
        if len(self.digest) != 32:
            raise SlshError(f"digest must be 32 bytes, got {len(self.digest)}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SlshDigest):
            return NotImplemented
        # Digests cross trust boundaries; compare without early exit.
        return hmac.compare_digest(self.digest, other.digest)

    def __hash__(self) -> int:
        return hash(self.digest)


def _seeded_gaussians(seed: bytes, count: int) -> np.ndarray:
    """Expand seed into `count` standard normals, deterministically.

    Stream block i is SHA-256(seed || i as u64 BE); blocks are split into
    big-endian u64 words, consumed in pairs by Box-Muller.  The mapping
    to (0,1] / [0,1) keeps log() away from zero.
    """
    pairs = (count + 1) // 2
    n_words = 2 * pairs
    n_blocks = (n_words + 3) // 4
    stream = b"".join(
        hashlib.sha256(seed + struct.pack(">Q", i)).digest() for i in range(n_blocks)
    )
    words = np.frombuffer(stream, dtype=">u8")[:n_words].astype(np.uint64)
    u1 = ((words[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (words[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = r * np.cos(2.0 * np.pi * u2)
    out[1::2] = r * np.sin(2.0 * np.pi * u2)
    return out[:count]


def gen_params(seed: bytes, dim: int, h: int = 24) -> LshParams:
    """Derive an h x dim hyperplane matrix from a 256-bit seed."""
    if len(seed) != SEED_LEN:
        raise BadDimensions(f"seed must be {SEED_LEN} bytes, got {len(seed)}")
    if dim < 2:
        raise BadDimensions(f"dim must be >= 2, got {dim}")
    if not 8 <= h <= 64:
        raise BadDimensions(f"bit count must be in [8, 64], got {h}")
    planes = _seeded_gaussians(seed, h * dim).reshape(h, dim)
    if not np.all(np.any(planes != 0.0, axis=1)):
        raise SlshError("degenerate all-zero plane row")
    param_id = hashlib.sha256(
        PARAM_ID_TAG + seed + struct.pack(">II", dim, h)
    ).digest()[:PARAM_ID_LEN]
    return LshParams(param_id=param_id, dim=dim, bits=h, seed=seed, planes=planes)


def encode_params(p: LshParams) -> bytes:
    """Wire form: param_id (16) || dim u32 BE || bits u32 BE || seed (32)."""
    return p.param_id + struct.pack(">II", p.dim, p.bits) + p.seed


def decode_params(buf: bytes) -> LshParams:
    """Rebuild params from the wire form, regenerating the planes."""
    if len(buf) != PARAMS_WIRE_LEN:
        raise MalformedParams(f"params must be {PARAMS_WIRE_LEN} bytes, got {len(buf)}")
    param_id = buf[:PARAM_ID_LEN]
    dim, h = struct.unpack(">II", buf[PARAM_ID_LEN : PARAM_ID_LEN + 8])
    seed = buf[PARAM_ID_LEN + 8 :]
    try:
        p = gen_params(seed, dim, h)
    except BadDimensions as e:
        raise MalformedParams(str(e)) from e
    if p.param_id != param_id:
        raise MalformedParams("param_id does not match (seed, dim, bits)")
    return p


def pack_bits(bools: np.ndarray) -> bytes:
    """MSB-first bit packing, zero-padded to whole bytes."""
    return np.packbits(bools.astype(np.uint8)).tobytes()


def lsh(params: LshParams, v: FeatureVector) -> LshBits:
    """Sign pattern: bit j = 1 iff plane_j . v >= 0."""
    if v.dim != params.dim:
        raise DimMismatch(f"vector dim {v.dim} vs params dim {params.dim}")
    dots = params.planes @ v.values.astype(np.float64)
    bools = dots >= 0.0
    return LshBits(bits=params.bits, packed=pack_bits(bools))


def slsh(params: LshParams, v: FeatureVector) -> SlshDigest:
    """SHA-256 of the domain tag, param_id, and packed sign pattern."""
    b = lsh(params, v)
    return digest_bits(params, b)


def digest_bits(params: LshParams, b: LshBits) -> SlshDigest:
    return SlshDigest(
        digest=hashlib.sha256(DIGEST_TAG + params.param_id + b.packed).digest()
    )


# Stacked planes per params tuple; a table set is reused for every image
# hashed under its generation, so the concat cost is paid once.
_STACK_CACHE: "dict[tuple, tuple[np.ndarray, list[bytes]]]" = {}
_STACK_CACHE_MAX = 32


def _stacked_planes(params_seq: "tuple[LshParams, ...]") -> "tuple[np.ndarray, list[bytes]]":
    key = tuple(p.param_id for p in params_seq)
    hit = _STACK_CACHE.get(key)
    if hit is None:
        if len(_STACK_CACHE) >= _STACK_CACHE_MAX:
            _STACK_CACHE.pop(next(iter(_STACK_CACHE)))
        hit = (
            np.concatenate([p.planes for p in params_seq], axis=0),
            [DIGEST_TAG + p.param_id for p in params_seq],
        )
        _STACK_CACHE[key] = hit
    return hit


def slsh_many(params_seq: "list[LshParams]", v: FeatureVector) -> "list[SlshDigest]":
    """Digest one vector under several parameter sets at once.

    Stacks all hyperplanes into a single matrix-vector product and packs
    all sign rows in one pass, so the cost scales with the total bit
    count rather than paying per-table dispatch overhead.  Output is
    identical to calling slsh() per table.
    """
    if not params_seq:
        return []
    for p in params_seq:
        if v.dim != p.dim:
            raise DimMismatch(f"vector dim {v.dim} vs params dim {p.dim}")
    stacked, prefixes = _stacked_planes(tuple(params_seq))
    bools = (stacked @ v.values.astype(np.float64)) >= 0.0
    first_bits = params_seq[0].bits
    if all(p.bits == first_bits for p in params_seq):
        # equal widths: one packbits call; row padding matches pack_bits
        rows = np.packbits(bools.reshape(len(params_seq), first_bits), axis=1)
        return [
            SlshDigest(digest=hashlib.sha256(prefix + row.tobytes()).digest())
            for prefix, row in zip(prefixes, rows)
        ]
    out = []
    at = 0
    for p in params_seq:
        chunk = bools[at: at + p.bits]
        at += p.bits
        out.append(digest_bits(p, LshBits(bits=p.bits, packed=pack_bits(chunk))))
    return out
