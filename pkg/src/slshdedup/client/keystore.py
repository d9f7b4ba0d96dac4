"""Passphrase-sealed store for image keys and their feature vectors.

Serving key exchanges later requires the original feature vector (the
holder re-hashes it under fresh parameters), so each record keeps the
vector alongside the 32-byte key.  The whole store is one AES-GCM blob
under a scrypt-derived key; every save re-seals with a fresh nonce.
"""

from __future__ import annotations

import hashlib
import json
import os
import secrets
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .. import features
from ..crypto import KEY_LEN, ImageKey

MAGIC = b"SLSHKST1"
SALT_LEN = 16
NONCE_LEN = 12

# scrypt cost: 16 MiB, interactive-grade
_SCRYPT_N = 2 ** 14
_SCRYPT_R = 8
_SCRYPT_P = 1


class KeystoreError(Exception):
    """Keystore file is unreadable or damaged."""


class WrongPassphrase(KeystoreError):
    """Passphrase does not open this keystore."""


@dataclass(frozen=True)
class KeyRecord:
    image_ref: bytes
    key: ImageKey
    vector: features.FeatureVector
    origin: str  # "upload" or "exchange"


def _seal_key(passphrase: str, salt: bytes) -> bytes:
    return hashlib.scrypt(
        passphrase.encode("utf-8"), salt=salt,
        n=_SCRYPT_N, r=_SCRYPT_R, p=_SCRYPT_P,
        maxmem=64 * 1024 * 1024, dklen=KEY_LEN,
    )


class Keystore:
    """Load-or-create a sealed keystore at `path`."""

    def __init__(self, path: str, passphrase: str) -> None:
        self.path = path
        self._records: dict[bytes, KeyRecord] = {}
        if os.path.exists(path):
            blob = open(path, "rb").read()
            self._salt, payload = self._open(blob, passphrase)
            self._load_payload(payload)
        else:
            self._salt = secrets.token_bytes(SALT_LEN)
        self._seal = _seal_key(passphrase, self._salt)

    # ----------------------------------------------------------- sealing

    @staticmethod
    def _open(blob: bytes, passphrase: str) -> tuple[bytes, dict]:
        if len(blob) < len(MAGIC) + SALT_LEN + NONCE_LEN + 16:
            raise KeystoreError("keystore file is truncated")
        if blob[: len(MAGIC)] != MAGIC:
            raise KeystoreError("not a keystore file")
        off = len(MAGIC)
        salt = blob[off:off + SALT_LEN]
        off += SALT_LEN
        nonce = blob[off:off + NONCE_LEN]
        ct = blob[off + NONCE_LEN:]
        seal = _seal_key(passphrase, salt)
        try:
            plain = AESGCM(seal).decrypt(nonce, ct, MAGIC + salt)
        except InvalidTag:
            raise WrongPassphrase("cannot unseal keystore") from None
        try:
            return salt, json.loads(plain)
        except ValueError as e:
            raise KeystoreError(f"sealed payload is not JSON: {e}") from e

    def _load_payload(self, payload: dict) -> None:
        for ref_hex, rec in payload.get("records", {}).items():
            ref = bytes.fromhex(ref_hex)
            vector = features.load_precomputed(bytes.fromhex(rec["vector"]))
            self._records[ref] = KeyRecord(
                image_ref=ref,
                key=ImageKey(bytes.fromhex(rec["key"])),
                vector=vector,
                origin=rec["origin"],
            )

    def save(self) -> None:
        payload = {
            "records": {
                ref.hex(): {
                    "key": rec.key.key.hex(),
                    "vector": features.serialize(rec.vector).hex(),
                    "origin": rec.origin,
                }
                for ref, rec in sorted(self._records.items())
            }
        }
        nonce = secrets.token_bytes(NONCE_LEN)
        ct = AESGCM(self._seal).encrypt(
            nonce, json.dumps(payload).encode("utf-8"), MAGIC + self._salt)
        tmp = self.path + ".tmp"
        with open(tmp, "wb") as f:
            f.write(MAGIC + self._salt + nonce + ct)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.path)

    # ----------------------------------------------------------- records

    def lookup(self, image_ref: bytes) -> KeyRecord | None:
        return self._records.get(image_ref)

    def put(self, image_ref: bytes, key: ImageKey,
            vector: features.FeatureVector, origin: str) -> None:
        self._records[image_ref] = KeyRecord(
            image_ref=image_ref, key=key, vector=vector, origin=origin)
        self.save()

    def remove(self, image_ref: bytes) -> bool:
        if image_ref not in self._records:
            return False
        del self._records[image_ref]
        self.save()
        return True

    def refs(self) -> list[bytes]:
        return sorted(self._records)

    def __len__(self) -> int:
        return len(self._records)
