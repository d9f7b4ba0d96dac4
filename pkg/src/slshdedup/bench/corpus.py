"""Seeded synthetic image corpus.

Each image is a smooth color gradient with soft-edged geometric shapes
and a little low-frequency texture.  Soft edges keep mild blurs from
shifting block means, but the random palette and layout make distinct
images nearly orthogonal in feature space, which is the regime the
dedup index needs.
"""

from __future__ import annotations

import os

import numpy as np


def _coords(size: int) -> tuple[np.ndarray, np.ndarray]:
    ax = (np.arange(size, dtype=np.float64) + 0.5) / size
    return np.meshgrid(ax, ax, indexing="xy")


def _gradient(rng: np.random.Generator, size: int) -> np.ndarray:
    xx, yy = _coords(size)
    angle = rng.uniform(0, 2 * np.pi)
    t = xx * np.cos(angle) + yy * np.sin(angle)
    t = (t - t.min()) / (t.max() - t.min() + 1e-12)
    c0 = rng.uniform(20, 235, size=3)
    c1 = rng.uniform(20, 235, size=3)
    return t[:, :, None] * (c1 - c0) + c0


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    xx, yy = _coords(size)
    field = np.zeros((size, size))
    for _ in range(rng.integers(2, 5)):
        fx, fy = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(3, 10)
        field += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    return field[:, :, None] * rng.uniform(0.5, 1.0, size=3)


def _soft_ellipse(rng: np.random.Generator, size: int) -> np.ndarray:
    xx, yy = _coords(size)
    cx, cy = rng.uniform(0.15, 0.85, size=2)
    rx, ry = rng.uniform(0.08, 0.30, size=2)
    theta = rng.uniform(0, np.pi)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    d = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    steep = rng.uniform(8, 16)
    return 1.0 / (1.0 + np.exp((d - 1.0) * steep))


def _soft_box(rng: np.random.Generator, size: int) -> np.ndarray:
    xx, yy = _coords(size)
    cx, cy = rng.uniform(0.2, 0.8, size=2)
    hw, hh = rng.uniform(0.08, 0.28, size=2)
    theta = rng.uniform(0, np.pi)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    steep = rng.uniform(30, 60)
    mu = 1.0 / (1.0 + np.exp((np.abs(u) - hw) * steep))
    mv = 1.0 / (1.0 + np.exp((np.abs(v) - hh) * steep))
    return mu * mv


def synth_image(seed: int, index: int, size: int = 256) -> np.ndarray:
    """Deterministic (H, W, 3) uint8 image for (seed, index)."""
    rng = np.random.default_rng([seed, index])
    img = _gradient(rng, size) + _texture(rng, size)
    for _ in range(rng.integers(3, 8)):
        mask = (_soft_ellipse if rng.random() < 0.5 else _soft_box)(rng, size)
        color = rng.uniform(15, 240, size=3)
        img = img * (1 - mask[:, :, None]) + color * mask[:, :, None]
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def generate_corpus(out_dir: str, count: int = 200, seed: int = 1,
                    size: int = 256) -> list[str]:
    """Write `count` PNGs; returns their paths in index order."""
    from PIL import Image as PILImage

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(count):
        path = os.path.join(out_dir, f"img-{i:04d}.png")
        PILImage.fromarray(synth_image(seed, i, size), "RGB").save(path)
        paths.append(path)
    return paths


def load_corpus(corpus_dir: str) -> list[str]:
    """All decodable image files in the directory, sorted by name."""
    exts = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}
    names = sorted(
        n for n in os.listdir(corpus_dir)
        if os.path.splitext(n)[1].lower() in exts
    )
    return [os.path.join(corpus_dir, n) for n in names]
