"""Password-authenticated key exchange (SPAKE2 shape) over safe-prime groups.

Two parties each feed in a password; they end up with equal 256-bit
keys iff the passwords were equal.  Role A sends X = g^x * M^pw, role B
sends Y = g^y * N^pw; both sides strip the blinding factor and derive
the key from the shared Diffie-Hellman value and the transcript.

Groups are the well-known MODP safe primes (1024 through 8192 bits,
see _modp.py) with g = 2 generating the prime-order subgroup of
quadratic residues.  Membership checks on received elements use the
Jacobi symbol, which for a safe prime decides subgroup membership at a
tiny fraction of the cost of an exponentiation.

Fixed-base exponentiations (g, M, N) go through precomputed comb
tables; the ephemeral-base exponentiation in finish() is a plain
modular exponentiation.  Pass constant_time=True to group_params() to
route every secret-exponent operation through gmpy2.powmod_sec instead
(slower; see the per-group engines below).
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import secrets
import struct
from dataclasses import dataclass, field

import gmpy2
import numpy as np

from ._modp import MODP_PRIMES

KDF_TAG = b"SLSH-PAKE-KDF"
H2G_TAG = b"SLSH-DEDUP-H2G"
M_SEED = b"SLSH-DEDUP-M"
N_SEED = b"SLSH-DEDUP-N"
PW_TAG = b"PAKE-pw"

SUPPORTED_BITS = (1024, 2048, 4096, 8192)


class PakeError(Exception):
    """Base class for key-exchange failures."""


class BadGroup(PakeError):
    """Unsupported or inconsistent group parameters."""


class InvalidElement(PakeError):
    """Peer message is not a valid subgroup element; abort the protocol."""


class EmptyPassword(PakeError):
    """Password byte string must be nonempty."""


class SessionConsumed(PakeError):
    """finish() was called twice on a single-use session."""


class Role(enum.Enum):
    A = "A"
    B = "B"


@dataclass(frozen=True)
class GroupParams:
    """Safe-prime group: p = 2q + 1, g = 2, M/N hashed to the subgroup."""

    bit_size: int
    p: int
    q: int
    g: int
    M: int
    N: int
    constant_time: bool = False

    @property
    def element_len(self) -> int:
        return self.bit_size // 8

    def encode_element(self, elem: int) -> bytes:
        return int(elem).to_bytes(self.element_len, "big")


def _expand_stream(block_fn, nbytes: int) -> bytes:
    out = []
    counter = 0
    while sum(len(b) for b in out) < nbytes:
        out.append(block_fn(counter))
        counter += 1
    return b"".join(out)[:nbytes]


def _hash_to_group(seed: bytes, p: int, bit_size: int) -> int:
    """Map a fixed string to a subgroup element of order q.

    Expanded hash output is reduced mod p and squared; squares form the
    order-q subgroup, and any non-identity square generates it.  The 16
    extra stream bytes make the mod-p bias negligible.
    """
    nbytes = (p.bit_length() + 7) // 8 + 16
    for salt in range(256):
        stream = _expand_stream(
            lambda i: hashlib.sha256(
                H2G_TAG + seed + struct.pack(">III", bit_size, salt, i)
            ).digest(),
            nbytes,
        )
        val = int.from_bytes(stream, "big") % p
        elem = pow(val, 2, p)
        if elem != 1 and val != 0:
            return elem
    raise BadGroup("hash-to-group failed to find a non-identity element")


_GROUP_CACHE: dict[tuple[int, bool], GroupParams] = {}


def group_params(bit_size: int, constant_time: bool = False) -> GroupParams:
    """Return the shared group for one of the supported moduli sizes."""
    key = (bit_size, constant_time)
    if key not in _GROUP_CACHE:
        if bit_size not in MODP_PRIMES:
            raise BadGroup(f"unsupported group size {bit_size}, "
                           f"expected one of {SUPPORTED_BITS}")
        p = MODP_PRIMES[bit_size]
        _GROUP_CACHE[key] = GroupParams(
            bit_size=bit_size,
            p=p,
            q=(p - 1) // 2,
            g=2,
            M=_hash_to_group(M_SEED, p, bit_size),
            N=_hash_to_group(N_SEED, p, bit_size),
            constant_time=constant_time,
        )
    return _GROUP_CACHE[key]


# ------------------------------------------------------- exponentiation

class _FixedBaseComb:
    """Precomputed comb for one fixed base mod p.

    Exponent bits are arranged in `window` rows of `d` columns; one
    table holds every row-combination for the low column half, a second
    table the same shifted by d/2 columns.  pow() then costs about d/2
    squarings and d multiplies instead of a full modexp.
    """

    def __init__(self, base: int, p: int, n_bits: int, window: int) -> None:
        self.p = gmpy2.mpz(p)
        self.window = window
        self.d = -(-n_bits // window)
        self.d_half = -(-self.d // 2)
        self.n_bits = n_bits

        p_ = self.p
        # Squaring chain base^(2^k), capturing the two column anchors
        # per row: k = i*d and k = i*d + d_half.
        anchors1 = []
        anchors2 = []
        cur = gmpy2.mpz(base) % p_
        for _ in range(window):
            anchors1.append(cur)
            for step in range(self.d):
                if step == self.d_half:
                    anchors2.append(cur)
                cur = cur * cur % p_
            if len(anchors2) < len(anchors1):  # d_half == d edge case
                anchors2.append(cur)

        def fill(anchors: list[gmpy2.mpz]) -> list[gmpy2.mpz]:
            table = [gmpy2.mpz(1)] * (1 << window)
            for j in range(1, 1 << window):
                low = j & -j
                table[j] = table[j ^ low] * anchors[low.bit_length() - 1] % p_
            return table

        self.t1 = fill(anchors1)
        self.t2 = fill(anchors2)

    def _digits(self, e: int) -> np.ndarray:
        total = self.window * self.d
        raw = int(e).to_bytes((total + 7) // 8, "little")
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8),
                             bitorder="little")[:total]
        rows = bits.reshape(self.window, self.d)
        weights = (1 << np.arange(self.window, dtype=np.int64))
        return weights @ rows.astype(np.int64)

    def pow(self, e: int) -> gmpy2.mpz:
        if e < 0 or e.bit_length() > self.window * self.d:
            raise ValueError("exponent out of comb range")
        if e == 0:
            return gmpy2.mpz(1)
        digits = self._digits(e)
        p_, t1, t2 = self.p, self.t1, self.t2
        acc = gmpy2.mpz(1)
        for k in range(self.d_half - 1, -1, -1):
            acc = acc * acc % p_
            j1 = digits[k]
            if j1:
                acc = acc * t1[j1] % p_
            k2 = k + self.d_half
            if k2 < self.d:
                j2 = digits[k2]
                if j2:
                    acc = acc * t2[j2] % p_
        return acc


def _comb_window(n_bits: int) -> int:
    if n_bits >= 8000:
        return 13
    if n_bits >= 4000:
        return 12
    if n_bits >= 2000:
        return 11
    return 10


class _GroupEngine:
    """Per-group math: combs for g/M/N plus the variable-base path."""

    def __init__(self, group: GroupParams) -> None:
        self.group = group
        self.p = gmpy2.mpz(group.p)
        n_bits = group.q.bit_length()
        w = _comb_window(n_bits)
        self.comb_g = _FixedBaseComb(group.g, group.p, n_bits, w)
        self.comb_M = _FixedBaseComb(group.M, group.p, n_bits, w)
        self.comb_N = _FixedBaseComb(group.N, group.p, n_bits, w)

    def pow_fixed(self, which: str, e: int) -> int:
        if self.group.constant_time:
            base = {"g": self.group.g, "M": self.group.M, "N": self.group.N}[which]
            return self._pow_sec(base, e)
        comb = {"g": self.comb_g, "M": self.comb_M, "N": self.comb_N}[which]
        return int(comb.pow(e))

    def pow_var(self, base: int, e: int) -> int:
        if self.group.constant_time:
            return self._pow_sec(base, e)
        return int(gmpy2.powmod(gmpy2.mpz(base), e, self.p))

    def _pow_sec(self, base: int, e: int) -> int:
        if e == 0:
            return 1
        return int(gmpy2.powmod_sec(gmpy2.mpz(base), e, self.p))


_ENGINE_CACHE: dict[tuple[int, bool], _GroupEngine] = {}


def _engine(group: GroupParams) -> _GroupEngine:
    key = (group.bit_size, group.constant_time)
    if key not in _ENGINE_CACHE:
        _ENGINE_CACHE[key] = _GroupEngine(group)
    return _ENGINE_CACHE[key]


def is_subgroup_element(group: GroupParams, elem: int) -> bool:
    """Nontrivial order-q check: 1 < elem < p and elem is a square.

    For p = 2q + 1 the squares are exactly the order-q subgroup plus the
    identity, so Jacobi symbol == 1 with elem != 1 pins order q.
    """
    if not 1 < elem < group.p:
        return False
    return gmpy2.jacobi(gmpy2.mpz(elem), gmpy2.mpz(group.p)) == 1


# ------------------------------------------------------------- protocol

def password_to_scalar(pw: bytes, group: GroupParams) -> int:
    """Hash-expand the password and reduce mod q.  Deterministic."""
    if not pw:
        raise EmptyPassword("password must be nonempty")
    nbytes = (group.q.bit_length() + 7) // 8 + 16
    stream = _expand_stream(
        lambda i: hashlib.sha256(pw + PW_TAG + struct.pack(">I", i)).digest(),
        nbytes,
    )
    return int.from_bytes(stream, "big") % group.q


def derive_key(
    context: bytes, X: bytes, Y: bytes, scalar: int, K: int, group: GroupParams
) -> bytes:
    """Transcript key derivation; replaying a transcript reproduces it."""
    elem_len = group.element_len
    h = hashlib.sha256()
    h.update(KDF_TAG)
    h.update(struct.pack(">I", len(context)))
    h.update(context)
    h.update(X)
    h.update(Y)
    h.update(int(scalar).to_bytes(elem_len, "big"))
    h.update(int(K).to_bytes(elem_len, "big"))
    return h.digest()


@dataclass(frozen=True)
class SessionKey:
    key: bytes

    def __post_init__(self) -> None:
        if len(self.key) != 32:
            raise PakeError(f"session key must be 32 bytes, got {len(self.key)}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SessionKey):
            return NotImplemented
        return hmac.compare_digest(self.key, other.key)

    def __hash__(self) -> int:
        return hash(self.key)


@dataclass
class PakeSession:
    """Single-use state for one run; created by start(), spent by finish()."""

    role: Role
    group: GroupParams
    password_scalar: int
    ephemeral_exponent: int
    own_message: bytes
    context: bytes
    used: bool = field(default=False, repr=False)


def start(
    role: Role, group: GroupParams, pw: bytes, context: bytes = b""
) -> tuple[PakeSession, bytes]:
    """Open a session: A emits g^x * M^pw, B emits g^y * N^pw."""
    scalar = password_to_scalar(pw, group)
    return _start_with_scalar(role, group, scalar, context)


def _start_with_scalar(
    role: Role, group: GroupParams, scalar: int, context: bytes
) -> tuple[PakeSession, bytes]:
    if group.bit_size not in SUPPORTED_BITS or group.p.bit_length() != group.bit_size:
        raise BadGroup(f"malformed group (bit_size={group.bit_size})")
    eng = _engine(group)
    x = secrets.randbelow(group.q - 1) + 1  # uniform in [1, q-1]
    blind = "M" if role is Role.A else "N"
    elem = eng.pow_fixed("g", x) * eng.pow_fixed(blind, scalar) % group.p
    msg = group.encode_element(elem)
    session = PakeSession(
        role=role,
        group=group,
        password_scalar=scalar,
        ephemeral_exponent=x,
        own_message=msg,
        context=context,
    )
    return session, msg


def finish(session: PakeSession, peer_message: bytes) -> SessionKey:
    """Consume the session and derive the key from the peer's element."""
    if session.used:
        raise SessionConsumed("PAKE session is single-use")
    session.used = True
    group = session.group
    if len(peer_message) != group.element_len:
        raise InvalidElement(
            f"peer element must be {group.element_len} bytes, got {len(peer_message)}"
        )
    peer = int.from_bytes(peer_message, "big")
    if not is_subgroup_element(group, peer):
        raise InvalidElement("peer element outside the prime-order subgroup")

    eng = _engine(group)
    s = session.password_scalar
    # Strip the peer's blinding factor: A removes N^pw, B removes M^pw.
    unblind = "N" if session.role is Role.A else "M"
    inv = eng.pow_fixed(unblind, (group.q - s) % group.q)
    K = eng.pow_var(peer * inv % group.p, session.ephemeral_exponent)

    if session.role is Role.A:
        X, Y = session.own_message, peer_message
    else:
        X, Y = peer_message, session.own_message
    return SessionKey(key=derive_key(session.context, X, Y, s, K, group))


def validate_group(group: GroupParams, primality_rounds: int = 25) -> None:
    """Full invariant check: primality, safe-prime shape, element orders.

    Costs several exponentiations at the group size; meant for tests and
    one-off verification, not the protocol hot path.
    """
    if group.p.bit_length() != group.bit_size:
        raise BadGroup("modulus bit length mismatch")
    if group.p != 2 * group.q + 1:
        raise BadGroup("p != 2q + 1")
    if group.p % 8 != 7:
        raise BadGroup("p % 8 != 7, g = 2 would not be a square")
    if not gmpy2.is_prime(gmpy2.mpz(group.p), primality_rounds):
        raise BadGroup("p fails primality")
    if not gmpy2.is_prime(gmpy2.mpz(group.q), primality_rounds):
        raise BadGroup("q fails primality")
    for name, elem in (("g", group.g), ("M", group.M), ("N", group.N)):
        if not 1 < elem < group.p:
            raise BadGroup(f"{name} out of range")
        if pow(gmpy2.mpz(elem), group.q, gmpy2.mpz(group.p)) != 1:
            raise BadGroup(f"{name} does not have order q")
