"""Distortion-vs-match-count matrix over an image corpus.

For every image: index its original digests, distort, re-extract,
re-hash, and record in how many tables the distorted version still
matches the original.  Levels run per the grids in distort.GRIDS.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .. import features
from ..slsh import gen_params, slsh_many
from . import distort
from .corpus import load_corpus


@dataclass(frozen=True)
class MatrixConfig:
    tables: int = 6
    bits: int = 24
    threshold: int = 4
    seed: int = 1
    kinds: tuple = field(default=tuple(distort.KINDS))


@dataclass
class MatrixResult:
    config: MatrixConfig
    images: int
    # (kind, level) -> list of per-image match counts in [0, tables]
    matches: dict
    unrelated_pairs: int
    unrelated_clean: int  # pairs with <= 1 table match

    def histogram(self, kind: str, level: int) -> list[int]:
        counts = [0] * (self.config.tables + 1)
        for v in self.matches[(kind, level)]:
            counts[v] += 1
        return counts

    def frac_at_least(self, kind: str, level: int, c: int) -> float:
        ms = self.matches[(kind, level)]
        return sum(1 for v in ms if v >= c) / len(ms)

    def median(self, kind: str, level: int) -> float:
        return float(np.median(self.matches[(kind, level)]))


def _vectors(paths: list[str]) -> list[features.FeatureVector]:
    return [features.extract_features(features.load_image(p)) for p in paths]


def run_distortion_matrix(corpus_dir: str,
                          config: MatrixConfig = MatrixConfig(),
                          paths: list[str] | None = None) -> MatrixResult:
    paths = paths if paths is not None else load_corpus(corpus_dir)
    if len(paths) < 100:
        raise ValueError(f"corpus has {len(paths)} images; need >= 100")
    vectors = _vectors(paths)
    dim = vectors[0].dim

    rng = np.random.default_rng(config.seed)
    params = [gen_params(rng.bytes(32), dim, config.bits)
              for _ in range(config.tables)]
    base = [slsh_many(params, v) for v in vectors]

    arrays = [features.load_image(p).to_array() for p in paths]
    matches: dict = {}
    for kind in config.kinds:
        for level in range(distort.LEVELS):
            row = []
            for i, arr in enumerate(arrays):
                twisted = distort.apply_distortion(kind, level, arr,
                                                   seed=config.seed)
                img = features.Image.from_array(twisted)
                dd = slsh_many(params, features.extract_features(img))
                row.append(sum(1 for a, b in zip(base[i], dd) if a == b))
            matches[(kind, level)] = row

    clean = 0
    total = 0
    for i in range(len(base)):
        for j in range(i + 1, len(base)):
            total += 1
            m = sum(1 for a, b in zip(base[i], base[j]) if a == b)
            if m <= 1:
                clean += 1

    return MatrixResult(config=config, images=len(paths), matches=matches,
                        unrelated_pairs=total, unrelated_clean=clean)


def write_csv(result: MatrixResult, out_dir: str) -> str:
    """Per-(kind, level) summary rows; returns the CSV path."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "distortion_matrix.csv")
    t = result.config.tables
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["kind", "level", "param", "images",
                    *[f"matches_{i}" for i in range(t + 1)],
                    "median", "frac_ge_c"])
        for kind in result.config.kinds:
            for level in range(distort.LEVELS):
                hist = result.histogram(kind, level)
                w.writerow([
                    kind, level, distort.GRIDS[kind][level], result.images,
                    *hist,
                    result.median(kind, level),
                    f"{result.frac_at_least(kind, level, result.config.threshold):.4f}",
                ])
        w.writerow(["unrelated_pairs", "", "", result.unrelated_pairs,
                    *([""] * (t + 1)),
                    "", f"{result.unrelated_clean / result.unrelated_pairs:.6f}"])
    return path


def write_heatmap(result: MatrixResult, out_dir: str) -> str:
    """Per-kind heatmaps of the match-count distribution; returns path."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    kinds = list(result.config.kinds)
    t = result.config.tables
    fig, axes = plt.subplots(2, (len(kinds) + 1) // 2,
                             figsize=(3.2 * ((len(kinds) + 1) // 2), 7))
    for ax, kind in zip(axes.ravel(), kinds):
        grid = np.array([
            result.histogram(kind, lvl) for lvl in range(distort.LEVELS)
        ], dtype=np.float64).T / result.images
        ax.imshow(grid, aspect="auto", origin="lower", cmap="viridis",
                  vmin=0.0, vmax=1.0)
        ax.set_title(kind, fontsize=9)
        ax.set_xlabel("level")
        ax.set_ylabel("matches")
        ax.set_xticks(range(distort.LEVELS))
        ax.set_yticks(range(0, t + 1, 2))
    for ax in axes.ravel()[len(kinds):]:
        ax.axis("off")
    fig.tight_layout()
    path = os.path.join(out_dir, "distortion_matrix.png")
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
