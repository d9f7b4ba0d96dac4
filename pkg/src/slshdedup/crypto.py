"""Symmetric crypto: image encryption, KEK derivation, key wrapping.

AEAD with a 96-bit nonce and 128-bit tag (AES-256-GCM).  Decryption
either authenticates or raises AuthFailure; plaintext never escapes on
a failed tag.  The two PAKE session keys are compressed into one
key-encryption key by hashing context || k1 || k2, preserving the
"both sessions must match" semantics with a fixed-width key.
"""

from __future__ import annotations

import hashlib
import os
import secrets
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

NONCE_LEN = 12
TAG_LEN = 16
KEY_LEN = 32
WRAPPED_LEN = NONCE_LEN + KEY_LEN + TAG_LEN  # fixed 60-byte wrapped blob


class CryptoError(Exception):
    """Base class for symmetric-crypto failures."""


class AuthFailure(CryptoError):
    """Authentication failed: tampering or wrong key.  Abort, never decrypt."""


class EntropyUnavailable(CryptoError):
    """OS randomness source failed."""


@dataclass(frozen=True)
class ImageKey:
    key: bytes = field(repr=False)

    def __post_init__(self) -> None:
        if len(self.key) != KEY_LEN:
            raise CryptoError(f"image key must be {KEY_LEN} bytes")


@dataclass(frozen=True)
class Ciphertext:
    nonce: bytes
    body: bytes
    tag: bytes

    def __post_init__(self) -> None:
        if len(self.nonce) != NONCE_LEN or len(self.tag) != TAG_LEN:
            raise CryptoError("bad nonce/tag length")

    def to_bytes(self) -> bytes:
        return self.nonce + self.body + self.tag

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Ciphertext":
        if len(raw) < NONCE_LEN + TAG_LEN:
            raise CryptoError(f"ciphertext too short: {len(raw)} bytes")
        return cls(
            nonce=raw[:NONCE_LEN],
            body=raw[NONCE_LEN:-TAG_LEN],
            tag=raw[-TAG_LEN:],
        )


def gen_key() -> ImageKey:
    """Fresh uniform 256-bit key from the OS CSPRNG."""
    try:
        return ImageKey(key=secrets.token_bytes(KEY_LEN))
    except (NotImplementedError, OSError) as e:  # pragma: no cover
        raise EntropyUnavailable(str(e)) from e


def _key_bytes(key) -> bytes:
    if isinstance(key, ImageKey):
        return key.key
    if isinstance(key, (bytes, bytearray)) and len(key) == KEY_LEN:
        return bytes(key)
    raise CryptoError("expected a 32-byte key or ImageKey")


def encrypt(key, plaintext: bytes) -> Ciphertext:
    """AEAD-encrypt under a fresh random nonce."""
    kb = _key_bytes(key)
    nonce = os.urandom(NONCE_LEN)
    sealed = AESGCM(kb).encrypt(nonce, plaintext, None)
    return Ciphertext(nonce=nonce, body=sealed[:-TAG_LEN], tag=sealed[-TAG_LEN:])


def decrypt(key, ct: Ciphertext) -> bytes:
    """Authenticate and decrypt; AuthFailure on any modification."""
    kb = _key_bytes(key)
    try:
        return AESGCM(kb).decrypt(ct.nonce, ct.body + ct.tag, None)
    except InvalidTag as e:
        raise AuthFailure("ciphertext failed authentication") from e


# The image blob operations are the same AEAD under clearer names.
encrypt_image = encrypt
decrypt_image = decrypt


def derive_kek(k_first: bytes, k_second: bytes, context: bytes) -> bytes:
    """kek = H(context || k_first || k_second); order-sensitive."""
    return hashlib.sha256(context + k_first + k_second).digest()


def wrap_key(kek: bytes, image_key: ImageKey) -> bytes:
    """Encrypt an image key under a kek; fixed 60-byte output."""
    wrapped = encrypt(kek, image_key.key).to_bytes()
    assert len(wrapped) == WRAPPED_LEN
    return wrapped


def unwrap_key(kek: bytes, wrapped: bytes) -> ImageKey:
    """Recover an image key; AuthFailure when the keks disagree."""
    if len(wrapped) != WRAPPED_LEN:
        raise AuthFailure(f"wrapped key must be {WRAPPED_LEN} bytes, got {len(wrapped)}")
    return ImageKey(key=decrypt(kek, Ciphertext.from_bytes(wrapped)))
