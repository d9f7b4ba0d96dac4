"""Content-addressed ciphertext store.

Blobs are keyed by the SHA-256 of their bytes (the image_ref), written
to a temp file, fsynced, then renamed into place, so a crash leaves
either the complete blob or no blob, never a torn one.  Writes verify
the digest, giving integrity checking for free on the way in; reads
re-verify on the way out.
"""

from __future__ import annotations

import hashlib
import os


class BlobError(Exception):
    pass


class CorruptBlob(BlobError):
    """Stored bytes no longer match their content address."""


class BlobStore:
    def __init__(self, root: str) -> None:
        self.root = root
        os.makedirs(root, exist_ok=True)

    def _path(self, ref: bytes) -> str:
        hexref = ref.hex()
        return os.path.join(self.root, hexref[:2], hexref[2:])

    def put(self, data: bytes) -> bytes:
        """Store bytes, return their content address.  Idempotent."""
        ref = hashlib.sha256(data).digest()
        path = self._path(ref)
        if os.path.exists(path):
            return ref
        os.makedirs(os.path.dirname(path), exist_ok=True)
        tmp = path + ".tmp"
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
        return ref

    def get(self, ref: bytes) -> bytes:
        try:
            with open(self._path(ref), "rb") as f:
                data = f.read()
        except FileNotFoundError:
            raise KeyError(ref.hex()) from None
        if hashlib.sha256(data).digest() != ref:
            raise CorruptBlob(ref.hex())
        return data

    def __contains__(self, ref: bytes) -> bool:
        return os.path.exists(self._path(ref))

    def sweep_tmp(self) -> int:
        """Drop torn temp files left by a crash mid-write."""
        dropped = 0
        for dirpath, _, names in os.walk(self.root):
            for name in names:
                if name.endswith(".tmp"):
                    os.unlink(os.path.join(dirpath, name))
                    dropped += 1
        return dropped
