"""Client tests: keystore sealing, socket transport, serve loop, CLI."""

import asyncio
import contextlib
import json
import os
import threading
import time

import numpy as np
import pytest

from slshdedup import crypto, features
from slshdedup.client import cli
from slshdedup.client.keystore import Keystore, KeystoreError, WrongPassphrase
from slshdedup.client.net import ServeLoop, connect
from slshdedup.protocol.flows import (
    Aborted,
    ClientState,
    Deduplicated,
    KeyOffered,
    Stored,
    uploader_run,
)
from slshdedup.server.daemon import DedupServer
from slshdedup.server.engine import ServerConfig, ServerEngine


def small_config(**kw) -> ServerConfig:
    defaults = dict(tables=4, hash_bits=12, threshold=3, dim=32,
                    rate=1000.0, burst=1000.0, exchange_deadline=5.0)
    defaults.update(kw)
    return ServerConfig(**defaults)


def make_vector(seed: int, dim: int = 32) -> features.FeatureVector:
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=dim)
    vals /= np.linalg.norm(vals)
    raw = (dim).to_bytes(4, "big") + vals.astype(">f4").tobytes()
    return features.load_precomputed(raw)


# ---------------------------------------------------------------- keystore

def test_keystore_round_trip(tmp_path):
    path = str(tmp_path / "keys.bin")
    ks = Keystore(path, "hunter2")
    key = crypto.gen_key()
    vec = make_vector(1)
    ref = b"\x11" * 32
    ks.put(ref, key, vec, "upload")
    ks.put(b"\x22" * 32, crypto.gen_key(), make_vector(2), "exchange")

    ks2 = Keystore(path, "hunter2")
    assert len(ks2) == 2
    rec = ks2.lookup(ref)
    assert rec.key == key
    assert rec.origin == "upload"
    assert rec.vector.dim == vec.dim
    assert np.array_equal(rec.vector.values, vec.values)  # bit-exact
    assert ks2.refs() == [ref, b"\x22" * 32]
    assert ks2.lookup(b"\x33" * 32) is None


def test_keystore_wrong_passphrase(tmp_path):
    path = str(tmp_path / "keys.bin")
    Keystore(path, "right").put(b"\x01" * 32, crypto.gen_key(),
                                make_vector(1), "upload")
    with pytest.raises(WrongPassphrase):
        Keystore(path, "wrong")


def test_keystore_tamper_detected(tmp_path):
    path = str(tmp_path / "keys.bin")
    Keystore(path, "pw").put(b"\x01" * 32, crypto.gen_key(),
                             make_vector(1), "upload")
    blob = bytearray(open(path, "rb").read())
    blob[-1] ^= 0x01
    open(path, "wb").write(bytes(blob))
    with pytest.raises(WrongPassphrase):
        Keystore(path, "pw")
    open(path, "wb").write(b"garbage")
    with pytest.raises(KeystoreError):
        Keystore(path, "pw")


def test_keystore_remove_and_atomic_save(tmp_path):
    path = str(tmp_path / "keys.bin")
    ks = Keystore(path, "pw")
    ks.put(b"\x01" * 32, crypto.gen_key(), make_vector(1), "upload")
    assert ks.remove(b"\x01" * 32)
    assert not ks.remove(b"\x01" * 32)
    assert not os.path.exists(path + ".tmp")
    assert len(Keystore(path, "pw")) == 0


def test_keystore_reseals_with_fresh_nonce(tmp_path):
    path = str(tmp_path / "keys.bin")
    ks = Keystore(path, "pw")
    ks.put(b"\x01" * 32, crypto.gen_key(), make_vector(1), "upload")
    first = open(path, "rb").read()
    ks.save()
    second = open(path, "rb").read()
    off = 8 + 16  # magic + salt
    assert first[off:off + 12] != second[off:off + 12]


# ---------------------------------------------------------- live server rig

@contextlib.contextmanager
def live_server(data_dir: str, **cfg):
    loop = asyncio.new_event_loop()
    engine = ServerEngine(data_dir, small_config(**cfg))
    server = DedupServer(engine, port=0)
    started = threading.Event()

    def runner():
        asyncio.set_event_loop(loop)
        loop.run_until_complete(server.start())
        started.set()
        loop.run_forever()

    thread = threading.Thread(target=runner, daemon=True)
    thread.start()
    assert started.wait(5)
    try:
        yield server
    finally:
        fut = asyncio.run_coroutine_threadsafe(server.stop(), loop)
        fut.result(10)
        loop.call_soon_threadsafe(loop.stop)
        thread.join(5)
        loop.close()


def state(user: str) -> ClientState:
    return ClientState(user_id=user, pake_bits=1024, timeout=10.0)


async def upload(port: int, user: str, data: bytes, vector):
    stream = await connect("127.0.0.1", port, user)
    try:
        return await uploader_run(data, vector, state(user), stream)
    finally:
        await stream.close()


class DictKeystore:
    def __init__(self):
        self.records = {}

    def lookup(self, image_ref):
        return self.records.get(image_ref)


class Record:
    def __init__(self, vector, key):
        self.vector = vector
        self.key = key


def test_socket_dedup_end_to_end(tmp_path):
    with live_server(str(tmp_path / "d")) as server:
        port = server.port

        async def go():
            vec = make_vector(9)
            res_a = await upload(port, "alice", b"the original", vec)
            assert isinstance(res_a, Stored)

            ks = DictKeystore()
            ks.records[res_a.image_ref] = Record(vec, res_a.image_key)
            serve_stream = await connect("127.0.0.1", port, "alice",
                                         serve=True)
            offered = []
            loop = ServeLoop(serve_stream, ks, state("alice"),
                             on_result=offered.append, max_exchanges=1)
            serve_task = asyncio.ensure_future(loop.run())

            res_b = await upload(port, "bob", b"never stored", vec)
            served = await asyncio.wait_for(serve_task, 10)
            await serve_stream.close()

            assert served == 1
            assert len(offered) == 1 and isinstance(offered[0], KeyOffered)
            assert isinstance(res_b, Deduplicated)
            assert res_b.plaintext == b"the original"
            assert res_b.image_key == res_a.image_key

        asyncio.run(go())


def test_serve_loop_concurrent_exchanges(tmp_path):
    # two uploaders dedup against one holder connection at once
    with live_server(str(tmp_path / "d")) as server:
        port = server.port

        async def go():
            vec = make_vector(5)
            res_a = await upload(port, "alice", b"shared original", vec)
            assert isinstance(res_a, Stored)

            ks = DictKeystore()
            ks.records[res_a.image_ref] = Record(vec, res_a.image_key)
            serve_stream = await connect("127.0.0.1", port, "alice",
                                         serve=True)
            loop = ServeLoop(serve_stream, ks, state("alice"),
                             max_exchanges=2)
            serve_task = asyncio.ensure_future(loop.run())

            results = await asyncio.gather(
                upload(port, "bob", b"b", vec),
                upload(port, "carol", b"c", vec),
            )
            served = await asyncio.wait_for(serve_task, 15)
            await serve_stream.close()

            assert served == 2
            for res in results:
                assert isinstance(res, Deduplicated)
                assert res.plaintext == b"shared original"

        asyncio.run(go())


def test_holder_offline_means_stored(tmp_path):
    with live_server(str(tmp_path / "d")) as server:
        port = server.port

        async def go():
            vec = make_vector(3)
            res_a = await upload(port, "alice", b"original", vec)
            res_b = await upload(port, "bob", b"duplicate bytes", vec)
            assert isinstance(res_a, Stored)
            assert isinstance(res_b, Stored)  # no holder online
            assert res_a.image_ref != res_b.image_ref

        asyncio.run(go())


# ---------------------------------------------------------------------- cli

def _png(tmp_path, seed: int) -> str:
    from PIL import Image as PILImage

    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    path = str(tmp_path / f"img-{seed}.png")
    PILImage.fromarray(arr, "RGB").save(path)
    return path


def _run_cli(args: list[str], server: str, keystore: str, user: str) -> int:
    return cli.main([
        "--server", server, "--keystore", keystore, "--user", user,
        "--passphrase", "pw", "--pake-bits", "1024", "--timeout", "10",
        *args,
    ])


def _events(capsys) -> list[dict]:
    out = capsys.readouterr().out
    events = []
    for line in out.splitlines():
        try:
            events.append(json.loads(line))
        except ValueError:
            pass
    return events


def test_cli_full_cycle(tmp_path, capsys):
    png = _png(tmp_path, 7)
    ks_a = str(tmp_path / "a.ks")
    ks_b = str(tmp_path / "b.ks")
    # engine dim must match the real extractor output
    with live_server(str(tmp_path / "d"), dim=160) as server:
        addr = f"127.0.0.1:{server.port}"

        assert _run_cli(["upload", png], addr, ks_a, "alice") == 0
        stored = [e for e in _events(capsys) if e["event"] == "stored"]
        assert len(stored) == 1
        ref_hex = stored[0]["image_ref"]

        serve_rc = {}

        def serve():
            serve_rc["rc"] = _run_cli(["serve", "--once"], addr, ks_a,
                                      "alice")

        thread = threading.Thread(target=serve)
        thread.start()
        try:
            # wait until the holder's hello registered server-side
            deadline = time.time() + 10
            while time.time() < deadline and "alice" not in server.engine.serving:
                time.sleep(0.02)
            assert "alice" in server.engine.serving
            # same file, second user: must dedup through the live holder
            rc = _run_cli(
                ["upload", png, "--out", str(tmp_path / "dedup.bin")],
                addr, ks_b, "bob")
            thread.join(20)
        finally:
            assert not thread.is_alive()
        assert rc == 0
        assert serve_rc["rc"] == 0
        events = _events(capsys)
        dedup = [e for e in events if e["event"] == "deduplicated"]
        assert len(dedup) == 1
        assert dedup[0]["image_ref"] == ref_hex
        assert any(e["event"] == "key_offered" for e in events)
        assert open(str(tmp_path / "dedup.bin"), "rb").read() == \
            open(png, "rb").read()

        # bob can now fetch and decrypt the stored ciphertext himself
        out = str(tmp_path / "fetched.png")
        assert _run_cli(["download", ref_hex, "--out", out],
                        addr, ks_b, "bob") == 0
        assert open(out, "rb").read() == open(png, "rb").read()

        # keystore bookkeeping reflects both acquisitions
        assert _run_cli(["keystore", "list"], addr, ks_b, "bob") == 0
        recs = [e for e in _events(capsys) if e["event"] == "record"]
        assert len(recs) == 1 and recs[0]["origin"] == "exchange"


def test_cli_download_without_key(tmp_path, capsys):
    with live_server(str(tmp_path / "d"), dim=160) as server:
        addr = f"127.0.0.1:{server.port}"
        rc = _run_cli(["download", "ab" * 32, "--out", str(tmp_path / "x")],
                      addr, str(tmp_path / "k.ks"), "bob")
        assert rc == cli.EXIT_NO_KEY


def test_cli_rate_limited_exit_code(tmp_path, capsys):
    png = _png(tmp_path, 8)
    with live_server(str(tmp_path / "d"), dim=160,
                     rate=0.000001, burst=1.0) as server:
        addr = f"127.0.0.1:{server.port}"
        ks = str(tmp_path / "k.ks")
        assert _run_cli(["upload", png], addr, ks, "alice") == 0
        rc = _run_cli(["upload", _png(tmp_path, 9)], addr, ks, "alice")
        assert rc == cli.EXIT_RATE_LIMITED
        events = _events(capsys)
        assert any(e["event"] == "aborted"
                   and e["reason"] == "rate_limited" for e in events)


def test_cli_wrong_passphrase_exit(tmp_path, capsys):
    ks = str(tmp_path / "k.ks")
    Keystore(ks, "right").put(b"\x01" * 32, crypto.gen_key(),
                              make_vector(1), "upload")
    rc = cli.main(["--keystore", ks, "--passphrase", "wrong",
                   "keystore", "list"])
    assert rc == cli.EXIT_ERROR
    events = _events(capsys)
    assert any(e["event"] == "error" for e in events)
