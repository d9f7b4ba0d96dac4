"""Deterministic image feature extraction.

Maps an RGB image to a fixed-dimension, L2-normalized feature vector so
that perceptually similar images land geometrically close.  The baseline
extractor is handcrafted (block luma means + color histograms) and fully
deterministic; externally computed vectors (e.g. CNN embeddings) can be
loaded through the same wire format via :func:`load_precomputed`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class FeatureError(Exception):
    """Base class for feature extraction and codec failures."""


class MalformedImage(FeatureError):
    """Pixel buffer does not satisfy the Image invariants."""


class ZeroVector(FeatureError):
    """Pre-normalization vector norm is below the representable floor."""


class MalformedVector(FeatureError):
    """Serialized vector buffer is truncated, oversized, or non-finite."""


class DimMismatch(FeatureError):
    """Operands have different dimensions."""


# Pre-normalization norms below this are treated as zero; never divide by them.
ZERO_NORM_FLOOR = 1e-12

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass(frozen=True)
class Image:
    """Raw 8-bit RGB image, row-major interleaved bytes."""

    width: int
    height: int
    data: bytes

    CHANNELS = 3

    def __post_init__(self) -> None:
        if self.width < 8 or self.height < 8:
            raise MalformedImage(
                f"image must be at least 8x8, got {self.width}x{self.height}"
            )
        expect = self.width * self.height * self.CHANNELS
        if len(self.data) != expect:
            raise MalformedImage(
                f"pixel buffer is {len(self.data)} bytes, expected {expect}"
            )

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "Image":
        """Wrap an (H, W, 3) uint8 array."""
        if pixels.ndim != 3 or pixels.shape[2] != cls.CHANNELS:
            raise MalformedImage(f"expected (H, W, 3) array, got {pixels.shape}")
        if pixels.dtype != np.uint8:
            raise MalformedImage(f"expected uint8 pixels, got {pixels.dtype}")
        h, w = pixels.shape[:2]
        return cls(width=w, height=h, data=pixels.tobytes())

    def to_array(self) -> np.ndarray:
        arr = np.frombuffer(self.data, dtype=np.uint8)
        return arr.reshape(self.height, self.width, self.CHANNELS)


def load_image(path: str) -> Image:
    """Decode an image file (PNG, JPEG, ...) to raw RGB."""
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        rgb = im.convert("RGB")
        return Image.from_array(np.asarray(rgb, dtype=np.uint8))


@dataclass(frozen=True)
class ExtractorConfig:
    """Knobs for the baseline extractor; defaults give dim=160."""

    resize_to: int = 64
    grid: int = 8
    hist_bins: int = 32
    # Histogram sections are scaled by this before normalization.  Block
    # means carry most of the discriminative signal; a small histogram
    # share keeps chroma-only edits (saturation) from swamping it while
    # still letting heavy pixel noise degrade the match count.
    hist_weight: float = 0.2

    @property
    def dim(self) -> int:
        return self.grid * self.grid + 3 * self.hist_bins

    def __post_init__(self) -> None:
        if self.resize_to % self.grid != 0:
            raise MalformedImage(
                f"resize_to={self.resize_to} must be a multiple of grid={self.grid}"
            )
        if 256 % self.hist_bins != 0:
            raise MalformedImage(f"hist_bins={self.hist_bins} must divide 256")


DEFAULT_CONFIG = ExtractorConfig()


@dataclass(frozen=True)
class FeatureVector:
    """Unit-length float32 vector.  values is read-only."""

    dim: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        v = self.values
        if v.ndim != 1 or v.shape[0] != self.dim:
            raise DimMismatch(f"dim={self.dim} but values has shape {v.shape}")
        v.setflags(write=False)


def _unitize32(values64: np.ndarray) -> np.ndarray:
    """Normalize float64 values to a unit-length float32 vector.

    Iterates to a float32 fixpoint so that re-normalizing the stored
    vector is a bit-level no-op; this is what makes the wire codec
    round-trip exactly.
    """
    norm = float(np.linalg.norm(values64))
    if norm < ZERO_NORM_FLOOR:
        raise ZeroVector(f"pre-normalization norm {norm} below {ZERO_NORM_FLOOR}")
    v = (values64 / norm).astype(np.float32)
    for _ in range(4):
        n = float(np.linalg.norm(v.astype(np.float64)))
        w = (v.astype(np.float64) / n).astype(np.float32)
        if np.array_equal(w.view(np.uint32), v.view(np.uint32)):
            break
        v = w
    return v


def _bilinear_resize(pixels: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Resize (H, W, C) to (out_h, out_w, C) with half-pixel-center sampling.

    Hand-rolled so the mapping is pinned: library resamplers differ across
    versions, and the digest pipeline downstream needs bit-stable input.
    """
    h, w = pixels.shape[:2]
    src = pixels.astype(np.float64)

    def axis_coords(n_src: int, n_dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        # Half-pixel centers, clamped at the borders.
        x = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
        x = np.clip(x, 0.0, n_src - 1.0)
        lo = np.floor(x).astype(np.int64)
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, x - lo

    y0, y1, fy = axis_coords(h, out_h)
    x0, x1, fx = axis_coords(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]

    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def extract_features(image: Image, config: ExtractorConfig = DEFAULT_CONFIG) -> FeatureVector:
    """Extract the baseline feature vector.

    Pipeline: bilinear-resize to resize_to²; grid×grid block-mean luma
    minus its own mean, scaled by 1/128; per-channel histograms of
    mean-centered intensities (linear soft binning), each minus its own
    mean, scaled by hist_weight; concatenate; L2-normalize.

    Subtracting each section's own mean cancels uniform brightness
    shifts exactly, and soft binning keeps one-step intensity jitter
    from jumping histogram bins; both are load-bearing for match rates
    under mild distortions.
    """
    resized = _bilinear_resize(image.to_array(), config.resize_to, config.resize_to)

    luma = resized @ _LUMA
    cell = config.resize_to // config.grid
    grid_means = luma.reshape(config.grid, cell, config.grid, cell).mean(axis=(1, 3))
    grid_sec = (grid_means - grid_means.mean()).ravel() / 128.0

    bin_width = 256 // config.hist_bins
    n_px = config.resize_to * config.resize_to
    half = config.hist_bins * bin_width / 2.0
    top = config.hist_bins - 1
    sections = [grid_sec]
    for ch in range(3):
        chan = resized[:, :, ch]
        pos = (chan - chan.mean() + half) / bin_width - 0.5
        lo = np.floor(pos).astype(np.int64)
        frac = pos - lo
        counts = (
            np.bincount(np.clip(lo, 0, top).ravel(),
                        weights=(1.0 - frac).ravel(), minlength=config.hist_bins)
            + np.bincount(np.clip(lo + 1, 0, top).ravel(),
                          weights=frac.ravel(), minlength=config.hist_bins)
        ) / n_px
        sections.append((counts - counts.mean()) * config.hist_weight)

    raw = np.concatenate(sections)
    return FeatureVector(dim=config.dim, values=_unitize32(raw))


def serialize(v: FeatureVector) -> bytes:
    """Wire format: u32 BE dim, then dim IEEE-754 float32 BE values."""
    return struct.pack(">I", v.dim) + v.values.astype(">f4").tobytes()


def load_precomputed(buf: bytes) -> FeatureVector:
    """Parse a serialized vector and re-normalize it to unit length."""
    if len(buf) < 4:
        raise MalformedVector(f"buffer too short for header: {len(buf)} bytes")
    (dim,) = struct.unpack(">I", buf[:4])
    if dim == 0:
        raise MalformedVector("dim is zero")
    expect = 4 + 4 * dim
    if len(buf) != expect:
        raise MalformedVector(f"buffer is {len(buf)} bytes, expected {expect} for dim={dim}")
    values = np.frombuffer(buf[4:], dtype=">f4").astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise MalformedVector("vector contains NaN or infinite entries")
    return FeatureVector(dim=dim, values=_unitize32(values))


def cosine_similarity(a: FeatureVector, b: FeatureVector) -> float:
    """Dot product of unit vectors, clamped to [-1, 1]."""
    if a.dim != b.dim:
        raise DimMismatch(f"dim {a.dim} vs {b.dim}")
    dot = float(np.dot(a.values.astype(np.float64), b.values.astype(np.float64)))
    return max(-1.0, min(1.0, dot))
