"""dedup-server entry point.

Every flag can also come from a DEDUP_-prefixed environment variable
(dashes to underscores): --data-dir -> DEDUP_DATA_DIR, etc.  Explicit
flags win over the environment.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import os
import signal

from .daemon import DedupServer
from .engine import ServerConfig, ServerEngine


def _env(name: str, default, cast):
    raw = os.environ.get("DEDUP_" + name)
    if raw is None:
        return default
    return cast(raw)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dedup-server",
        description="Near-duplicate image dedup server.",
    )
    p.add_argument("--listen", default=_env("LISTEN", "127.0.0.1:7710", str),
                   help="addr:port to bind (default 127.0.0.1:7710)")
    p.add_argument("--data-dir", default=_env("DATA_DIR", "./dedup-data", str),
                   help="durable state directory")
    p.add_argument("--tables", type=int, default=_env("TABLES", 6, int),
                   help="hash tables per generation")
    p.add_argument("--hash-bits", type=int, default=_env("HASH_BITS", 24, int),
                   help="LSH bits per table")
    p.add_argument("--threshold", type=int, default=_env("THRESHOLD", 4, int),
                   help="collisions declaring a duplicate")
    p.add_argument("--rate", type=float, default=_env("RATE", 1.0, float),
                   help="query tokens refilled per second per user")
    p.add_argument("--burst", type=float, default=_env("BURST", 60.0, float),
                   help="query token bucket capacity")
    p.add_argument("--quota-mb", type=int, default=_env("QUOTA_MB", 1024, int),
                   help="per-user storage quota in MiB")
    p.add_argument("--capacity", type=int, default=_env("CAPACITY", 0, int),
                   help="entries per generation before rollover "
                        "(0 = 2^(hash_bits-2))")
    p.add_argument("--exchange-deadline", type=float,
                   default=_env("EXCHANGE_DEADLINE", 30.0, float),
                   help="per-phase exchange timeout in seconds")
    p.add_argument("--verbose", action="store_true",
                   default=bool(_env("VERBOSE", "", str)))
    return p


def parse_listen(listen: str) -> tuple[str, int]:
    host, _, port = listen.rpartition(":")
    if not host or not port.isdigit():
        raise SystemExit(f"bad --listen value: {listen!r} (want addr:port)")
    return host, int(port)


async def _run(args) -> None:
    config = ServerConfig(
        tables=args.tables,
        hash_bits=args.hash_bits,
        threshold=args.threshold,
        rate=args.rate,
        burst=args.burst,
        quota_bytes=args.quota_mb * 1024 * 1024,
        rollover_capacity=args.capacity,
        exchange_deadline=args.exchange_deadline,
    )
    engine = ServerEngine(args.data_dir, config)
    host, port = parse_listen(args.listen)
    server = DedupServer(engine, host, port)
    await server.start()

    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    print(f"dedup-server listening on {server.host}:{server.port}", flush=True)
    await stop.wait()
    await server.stop()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    asyncio.run(_run(args))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
