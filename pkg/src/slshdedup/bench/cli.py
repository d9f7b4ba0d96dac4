"""Benchmark CLI: distortion matrices, timing curves, concurrency QoS.

All benches are seeded; distortion output is bit-reproducible for a
fixed seed, timing numbers obviously are not.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import tempfile

from . import distort, qos, timing
from .corpus import generate_corpus, load_corpus
from .matrix import MatrixConfig, run_distortion_matrix, write_csv, write_heatmap


def _ensure_corpus(corpus_dir: str, count: int, seed: int) -> list[str]:
    try:
        paths = load_corpus(corpus_dir)
    except FileNotFoundError:
        paths = []
    if len(paths) >= 100:
        return paths
    print(f"generating {count}-image synthetic corpus in {corpus_dir}",
          file=sys.stderr)
    return generate_corpus(corpus_dir, count=count, seed=seed)


def _cmd_distort(args) -> int:
    paths = _ensure_corpus(args.corpus, args.count, args.seed)
    config = MatrixConfig(tables=args.tables, bits=args.bits,
                          threshold=args.threshold, seed=args.seed)
    result = run_distortion_matrix(args.corpus, config, paths=paths)
    csv_path = write_csv(result, args.out)
    png_path = write_heatmap(result, args.out)
    c = config.threshold
    print(f"images: {result.images}  tables: {config.tables}  "
          f"bits: {config.bits}  threshold: {c}")
    for kind in config.kinds:
        cells = "  ".join(
            f"L{lvl}:{result.frac_at_least(kind, lvl, c):.2f}"
            for lvl in range(distort.LEVELS))
        print(f"  frac>= {c}  {kind:<14} {cells}")
    clean = result.unrelated_clean / result.unrelated_pairs
    print(f"unrelated pairs with <=1 match: {clean:.4%} "
          f"({result.unrelated_clean}/{result.unrelated_pairs})")
    print(f"wrote {csv_path}")
    print(f"wrote {png_path}")
    return 0


def _write_rows(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _cmd_timing(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    hrows = timing.hash_timing(seed=args.seed)
    _write_rows(os.path.join(args.out, "hash_timing.csv"), hrows)
    a, b, r2 = timing.hash_fit(hrows)
    print(f"hash: median_us ~= {a:.4f} * (tables*bits) + {b:.4f}  R^2={r2:.4f}")

    qrows = timing.query_timing(tables=args.tables, bits=args.bits,
                                seed=args.seed)
    _write_rows(os.path.join(args.out, "query_timing.csv"), qrows)
    flat = timing.query_flatness(qrows)
    for r in qrows:
        print(f"query: size={r['size']:>7} avg={r['avg_us']:8.2f}us "
              f"median={r['median_us']:8.2f}us cold={r['cold_us']:8.2f}us")
    print(f"query flatness (max/min avg): {flat:.3f}")

    _plot_timing(args.out, hrows, (a, b, r2), qrows)
    print(f"wrote {args.out}/hash_timing.csv, query_timing.csv, timing.png")
    return 0


def _plot_timing(out_dir: str, hrows: list[dict], fit: tuple,
                 qrows: list[dict]) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    a, b, r2 = fit
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    xs = [r["work"] for r in hrows]
    ax1.scatter(xs, [r["median_us"] for r in hrows], s=14)
    ax1.plot(sorted(xs), [a * x + b for x in sorted(xs)], "r--",
             label=f"fit R^2={r2:.3f}")
    ax1.set_xlabel("tables x bits")
    ax1.set_ylabel("median digest-set time (us)")
    ax1.legend(fontsize=8)
    ax2.plot([r["size"] for r in qrows], [r["avg_us"] for r in qrows], "o-")
    ax2.set_xscale("log")
    ax2.set_xlabel("index size")
    ax2.set_ylabel("avg per-query time (us)")
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "timing.png"), dpi=110)
    plt.close(fig)


def _levels(max_workers: int) -> list[int]:
    out, w = [], 1
    while w <= max_workers:
        out.append(w)
        w *= 2
    if out[-1] != max_workers:
        out.append(max_workers)
    return out


def _cmd_qos(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    rows = []
    failures = 0
    with tempfile.TemporaryDirectory(prefix="dedup-qos-") as data_dir:
        with qos.hosted_server(data_dir) as server:
            for mode in qos.MODES:
                for workers in _levels(args.max_workers):
                    res = qos.run_qos_sync("127.0.0.1", server.port, mode,
                                           workers, timeout=args.timeout)
                    failures += res.failures
                    rows.append({
                        "mode": mode, "workers": workers, "ok": res.ok,
                        "failures": res.failures,
                        "total_ms": res.elapsed_s * 1e3,
                        "avg_ms": res.latency.mean * 1e3,
                        "median_ms": res.latency.median * 1e3,
                        "max_ms": res.latency.hi * 1e3,
                    })
                    print(f"{mode:<5} workers={workers:>5} ok={res.ok:>5} "
                          f"fail={res.failures} total={res.elapsed_s * 1e3:9.1f}ms "
                          f"avg={res.latency.mean * 1e3:8.2f}ms")
    _write_rows(os.path.join(args.out, "qos.csv"), rows)
    _plot_qos(args.out, rows)
    print(f"wrote {args.out}/qos.csv, qos.png")
    if failures:
        print(f"FAILURES: {failures}", file=sys.stderr)
        return 1
    return 0


def _plot_qos(out_dir: str, rows: list[dict]) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    for mode in qos.MODES:
        rs = [r for r in rows if r["mode"] == mode]
        ws = [r["workers"] for r in rs]
        ax1.plot(ws, [r["avg_ms"] for r in rs], "o-", label=mode)
        ax2.plot(ws, [r["total_ms"] for r in rs], "o-", label=mode)
    for ax, label in ((ax1, "avg per-request (ms)"), (ax2, "total (ms)")):
        ax.set_xscale("log", base=2)
        ax.set_xlabel("concurrent workers")
        ax.set_ylabel(label)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "qos.png"), dpi=110)
    plt.close(fig)


def main(argv=None) -> int:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--corpus", default="./bench-corpus",
                        help="image directory (synthesized when missing)")
    shared.add_argument("--out", default="./bench-out",
                        help="directory for CSV files and plots")
    shared.add_argument("--seed", type=int, default=1, help="bench RNG seed")
    shared.add_argument("--tables", type=int, default=6)
    shared.add_argument("--bits", type=int, default=24)
    shared.add_argument("--threshold", type=int, default=4)
    p = argparse.ArgumentParser(
        prog="dedup-bench",
        description="distortion, timing, and concurrency benchmarks")
    sub = p.add_subparsers(dest="command", required=True)
    d = sub.add_parser("distort", parents=[shared],
                       help="distortion-vs-match-count matrix")
    d.add_argument("--count", type=int, default=200,
                   help="synthetic corpus size when generating")
    sub.add_parser("timing", parents=[shared],
                   help="hash and query timing curves")
    q = sub.add_parser("qos", parents=[shared],
                       help="concurrent load against a local server")
    q.add_argument("--max-workers", type=int, default=1024)
    q.add_argument("--timeout", type=float, default=120.0)
    args = p.parse_args(argv)
    try:
        if args.command == "distort":
            return _cmd_distort(args)
        if args.command == "timing":
            return _cmd_timing(args)
        return _cmd_qos(args)
    except KeyboardInterrupt:
        return 1


if __name__ == "__main__":
    sys.exit(main())
