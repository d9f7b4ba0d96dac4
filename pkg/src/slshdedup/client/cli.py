"""`dedup-client`: upload, download, serve, and keystore management.

Reports are JSON lines on stdout so scripts can consume them.  Exit
codes: 0 success, 1 local/decode error, 2 exchange aborted, 3 rate
limited, 4 authentication failure, 5 key not in local keystore.
"""

from __future__ import annotations

import argparse
import asyncio
import getpass
import json
import logging
import os
import signal
import sys

from .. import crypto, features
from ..protocol import messages as m
from ..protocol.flows import (
    Aborted,
    ClientState,
    Deduplicated,
    KeyOffered,
    Stored,
)
from ..protocol.flows import uploader_run
from .keystore import Keystore, KeystoreError, WrongPassphrase
from .net import ConnectionClosed, HandshakeRefused, ServeLoop, connect

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ABORTED = 2
EXIT_RATE_LIMITED = 3
EXIT_AUTH_FAILURE = 4
EXIT_NO_KEY = 5

_ABORT_CODES = {
    "rate_limited": EXIT_RATE_LIMITED,
    "auth_failure": EXIT_AUTH_FAILURE,
}


def _emit(event: str, **fields) -> None:
    print(json.dumps({"event": event, **fields}), flush=True)


def _parse_server(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


def _passphrase(args) -> str:
    if args.passphrase is not None:
        return args.passphrase
    env = os.environ.get(args.passphrase_env)
    if env is not None:
        return env
    return getpass.getpass("keystore passphrase: ")


def _open_keystore(args) -> Keystore:
    return Keystore(args.keystore, _passphrase(args))


def _client_state(args) -> ClientState:
    return ClientState(user_id=args.user, pake_bits=args.pake_bits,
                       timeout=args.timeout)


def _abort_exit(reason: str) -> int:
    return _ABORT_CODES.get(reason, EXIT_ABORTED)


# ------------------------------------------------------------- subcommands

async def _cmd_upload(args) -> int:
    keystore = _open_keystore(args)
    image = features.load_image(args.file)
    vector = features.extract_features(image)
    plaintext = open(args.file, "rb").read()

    host, port = _parse_server(args.server)
    stream = await connect(host, port, args.user)
    try:
        result = await uploader_run(plaintext, vector, _client_state(args),
                                    stream)
    finally:
        await stream.close()

    if isinstance(result, Stored):
        keystore.put(result.image_ref, result.image_key, vector, "upload")
        _emit("stored", image_ref=result.image_ref.hex(),
              size=len(plaintext))
        return EXIT_OK
    if isinstance(result, Deduplicated):
        keystore.put(result.image_ref, result.image_key, vector, "exchange")
        _emit("deduplicated", image_ref=result.image_ref.hex(),
              collisions=result.collisions, size=len(result.plaintext))
        if args.out:
            with open(args.out, "wb") as f:
                f.write(result.plaintext)
        return EXIT_OK
    assert isinstance(result, Aborted)
    _emit("aborted", reason=result.reason)
    return _abort_exit(result.reason)


async def _cmd_download(args) -> int:
    keystore = _open_keystore(args)
    image_ref = bytes.fromhex(args.image_ref)
    record = keystore.lookup(image_ref)
    if record is None:
        _emit("error", detail="no key for image in keystore",
              image_ref=args.image_ref)
        return EXIT_NO_KEY

    host, port = _parse_server(args.server)
    stream = await connect(host, port, args.user)
    try:
        await stream.send(m.FetchCt(image_ref=image_ref))
        resp = await stream.recv()
    finally:
        await stream.close()
    if isinstance(resp, m.Abort):
        _emit("aborted", reason=resp.reason.name.lower())
        return _abort_exit(resp.reason.name.lower())
    if not isinstance(resp, m.Ct):
        _emit("error", detail=f"unexpected response {type(resp).__name__}")
        return EXIT_ERROR
    try:
        plaintext = crypto.decrypt_image(
            record.key, crypto.Ciphertext.from_bytes(resp.ciphertext))
    except crypto.AuthFailure:
        _emit("error", detail="ciphertext failed authentication")
        return EXIT_AUTH_FAILURE
    with open(args.out, "wb") as f:
        f.write(plaintext)
    _emit("downloaded", image_ref=args.image_ref, size=len(plaintext),
          out=args.out)
    return EXIT_OK


async def _cmd_serve(args) -> int:
    keystore = _open_keystore(args)
    host, port = _parse_server(args.server)
    stream = await connect(host, port, args.user, serve=True)

    def report(result) -> None:
        if isinstance(result, KeyOffered):
            _emit("key_offered", image_ref=result.image_ref.hex())
        elif isinstance(result, Aborted):
            _emit("exchange_aborted", reason=result.reason)

    loop = ServeLoop(stream, keystore, _client_state(args),
                     on_result=report, max_exchanges=args.once and 1 or None)
    _emit("serving", server=args.server, user=args.user,
          images=len(keystore))

    run_task = asyncio.ensure_future(loop.run())
    stop = getattr(signal, "SIGINT", None)
    if stop is not None:
        try:
            asyncio.get_running_loop().add_signal_handler(
                stop, run_task.cancel)
        except (NotImplementedError, RuntimeError, ValueError):
            pass  # not on the main thread; ctrl-C still cancels asyncio.run
    try:
        served = await run_task
    except asyncio.CancelledError:
        served = loop._completed
    finally:
        await stream.close()
    _emit("stopped", served=served)
    return EXIT_OK


def _cmd_keystore(args) -> int:
    keystore = _open_keystore(args)
    if args.keystore_cmd == "list":
        for ref in keystore.refs():
            rec = keystore.lookup(ref)
            _emit("record", image_ref=ref.hex(), origin=rec.origin,
                  dim=rec.vector.dim)
        _emit("summary", records=len(keystore))
        return EXIT_OK
    assert args.keystore_cmd == "remove"
    ref = bytes.fromhex(args.image_ref)
    if keystore.remove(ref):
        _emit("removed", image_ref=args.image_ref)
        return EXIT_OK
    _emit("error", detail="no such record", image_ref=args.image_ref)
    return EXIT_NO_KEY


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dedup-client",
        description="near-duplicate image dedup client")
    p.add_argument("--server", default="127.0.0.1:7710",
                   help="server address host:port (default 127.0.0.1:7710)")
    p.add_argument("--keystore", required=True, help="sealed keystore path")
    p.add_argument("--user", default=os.environ.get("USER", "anon"),
                   help="user id presented to the server")
    p.add_argument("--passphrase", default=None,
                   help="keystore passphrase (prefer the env var)")
    p.add_argument("--passphrase-env", default="DEDUP_KEYSTORE_PASS",
                   help="env var holding the keystore passphrase")
    p.add_argument("--pake-bits", type=int, default=2048,
                   choices=(1024, 2048, 4096, 8192),
                   help="key-exchange group size")
    p.add_argument("--timeout", type=float, default=30.0,
                   help="per-message timeout in seconds")
    p.add_argument("-v", "--verbose", action="store_true")

    sub = p.add_subparsers(dest="cmd", required=True)

    up = sub.add_parser("upload", help="hash, query, and store an image")
    up.add_argument("file", help="image file to upload")
    up.add_argument("--out", default=None,
                    help="write the deduplicated original here, if any")

    down = sub.add_parser("download", help="fetch and decrypt a ciphertext")
    down.add_argument("image_ref", help="image reference (64 hex chars)")
    down.add_argument("--out", required=True, help="output file")

    serve = sub.add_parser("serve", help="answer key exchange requests")
    serve.add_argument("--once", action="store_true",
                       help="exit after one completed exchange")

    ks = sub.add_parser("keystore", help="inspect the local keystore")
    ks_sub = ks.add_subparsers(dest="keystore_cmd", required=True)
    ks_sub.add_parser("list", help="list stored records")
    ks_rm = ks_sub.add_parser("remove", help="delete one record")
    ks_rm.add_argument("image_ref")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.cmd == "upload":
            return asyncio.run(_cmd_upload(args))
        if args.cmd == "download":
            return asyncio.run(_cmd_download(args))
        if args.cmd == "serve":
            return asyncio.run(_cmd_serve(args))
        return _cmd_keystore(args)
    except WrongPassphrase:
        _emit("error", detail="wrong keystore passphrase")
        return EXIT_ERROR
    except (KeystoreError, features.FeatureError, ValueError, OSError) as e:
        _emit("error", detail=str(e))
        return EXIT_ERROR
    except (ConnectionClosed, HandshakeRefused) as e:
        _emit("error", detail=str(e))
        return EXIT_ERROR
    except KeyboardInterrupt:
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
