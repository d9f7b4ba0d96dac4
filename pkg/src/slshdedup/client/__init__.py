"""Client-side pieces: sealed key storage, transport, and the CLI."""

from .keystore import KeyRecord, Keystore, KeystoreError, WrongPassphrase
from .net import ConnectionClosed, MsgStream, ServeLoop, connect

__all__ = [
    "ConnectionClosed",
    "KeyRecord",
    "Keystore",
    "KeystoreError",
    "MsgStream",
    "ServeLoop",
    "WrongPassphrase",
    "connect",
]
