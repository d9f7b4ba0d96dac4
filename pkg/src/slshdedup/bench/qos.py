"""Concurrency harness: many simultaneous clients against a live server.

Two operation modes, both over real sockets:

* ``query``  -- HELLO, then UPLOAD_HASHES with random digests (a miss),
  waiting for the DEDUP_RESULT verdict.
* ``index``  -- the query, then UPLOAD_CT of a small random blob, then
  FETCH_CT of the acked image_ref and a byte-for-byte comparison.

All workers connect first, then fire together, so the in-flight count
really is the worker count.
"""

from __future__ import annotations

import asyncio
import contextlib
import os
import threading
import time
from dataclasses import dataclass

from ..client.net import MsgStream
from ..protocol import messages as m
from .timing import Stats, collect

MODES = ("query", "index")


@dataclass
class QosResult:
    mode: str
    workers: int
    ok: int
    failures: int
    elapsed_s: float
    latency: Stats
    errors: list


class _OpFailed(Exception):
    pass


async def _expect(stream: MsgStream, kind) -> object:
    msg = await stream.recv()
    if not isinstance(msg, kind):
        raise _OpFailed(f"wanted {kind.__name__}, got {type(msg).__name__}")
    return msg


def _random_digest_sets(gen_shapes: list[tuple[int, int]]) -> tuple:
    # Random digests collide with nothing; every query is a clean miss.
    return tuple((gen_id, tuple(os.urandom(32) for _ in range(tables)))
                 for gen_id, tables in gen_shapes)


async def _fetch_shapes(host: str, port: int) -> list[tuple[int, int]]:
    reader, writer = await asyncio.open_connection(host, port)
    stream = MsgStream(reader, writer)
    try:
        await stream.send(m.Hello(user_id="bench-probe"))
        await _expect(stream, m.Ack)
        await stream.send(m.GetParams())
        params = await _expect(stream, m.Params)
        return [(gen_id, len(ps)) for gen_id, ps in params.generations]
    finally:
        await stream.close()


async def _worker(host: str, port: int, user: str, mode: str,
                  gen_shapes: list[tuple[int, int]],
                  ready: asyncio.Event, go: asyncio.Event,
                  latencies: list[float]) -> None:
    try:
        reader, writer = await asyncio.open_connection(host, port)
    finally:
        ready.set()  # never leave the coordinator waiting on a dead worker
    stream = MsgStream(reader, writer)
    try:
        await go.wait()
        t0 = time.perf_counter()
        await stream.send(m.Hello(user_id=user))
        await _expect(stream, m.Ack)
        await stream.send(m.UploadHashes(
            user_id=user, upload_ref=os.urandom(16),
            digest_sets=_random_digest_sets(gen_shapes)))
        verdict = await _expect(stream, m.DedupResult)
        if verdict.kind != m.DedupResult.KIND_UNIQUE:
            raise _OpFailed("random digests reported as duplicate")
        if mode == "index":
            blob = os.urandom(128)
            await stream.send(m.UploadCt(upload_token=verdict.upload_token,
                                         ciphertext=blob))
            ack = await _expect(stream, m.Ack)
            image_ref = ack.payload
            if len(image_ref) != 32:
                raise _OpFailed("upload ack lacks an image_ref")
            await stream.send(m.FetchCt(image_ref=image_ref))
            ct = await _expect(stream, m.Ct)
            if ct.ciphertext != blob:
                raise _OpFailed("fetched ciphertext differs from upload")
        latencies.append(time.perf_counter() - t0)
    finally:
        await stream.close()


async def run_qos(host: str, port: int, mode: str, workers: int,
                  timeout: float = 60.0) -> QosResult:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    gen_shapes = await _fetch_shapes(host, port)
    go = asyncio.Event()
    ready = [asyncio.Event() for _ in range(workers)]
    latencies: list[float] = []
    tasks = [asyncio.ensure_future(
        _worker(host, port, f"w{i:04d}", mode, gen_shapes, r, go, latencies))
        for i, r in enumerate(ready)]
    # Fire only once every worker holds an open connection, so the
    # in-flight count really is `workers`.
    await asyncio.wait_for(
        asyncio.gather(*(r.wait() for r in ready)), timeout)
    start = time.perf_counter()
    go.set()
    done = await asyncio.wait_for(
        asyncio.gather(*tasks, return_exceptions=True), timeout)
    elapsed = time.perf_counter() - start
    errors = [e for e in done if isinstance(e, BaseException)]
    ok = len(done) - len(errors)
    stats = collect(latencies) if latencies else Stats(0, 0.0, 0.0, 0.0, 0.0, 0.0)
    return QosResult(mode=mode, workers=workers, ok=ok, failures=len(errors),
                     elapsed_s=elapsed, latency=stats, errors=errors[:8])


def run_qos_sync(host: str, port: int, mode: str, workers: int,
                 timeout: float = 60.0) -> QosResult:
    """Blocking wrapper; runs its own event loop."""
    return asyncio.run(run_qos(host, port, mode, workers, timeout=timeout))


@contextlib.contextmanager
def hosted_server(data_dir: str, config=None):
    """A live socket server on its own thread; yields the DedupServer."""
    from ..server.daemon import DedupServer
    from ..server.engine import ServerConfig, ServerEngine

    if config is None:
        # Per-user buckets would throttle a packed worker swarm; the
        # bench measures the pipeline, not the limiter.
        config = ServerConfig(rate=1e9, burst=1e9)
    engine = ServerEngine(data_dir, config)
    server = DedupServer(engine, port=0)
    loop = asyncio.new_event_loop()
    started = threading.Event()

    def _run() -> None:
        asyncio.set_event_loop(loop)
        loop.run_until_complete(server.start())
        started.set()
        loop.run_forever()

    thread = threading.Thread(target=_run, daemon=True)
    thread.start()
    if not started.wait(10.0):
        raise RuntimeError("bench server did not start")
    try:
        yield server
    finally:
        asyncio.run_coroutine_threadsafe(server.stop(), loop).result(10.0)
        loop.call_soon_threadsafe(loop.stop)
        thread.join(10.0)
        loop.close()
