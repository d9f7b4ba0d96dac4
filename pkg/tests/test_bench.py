"""Benchmark harness tests: corpus, distortions, stats, matrix, QoS."""

import math
import os
import statistics

import numpy as np
import pytest

from slshdedup.bench import distort, qos, timing
from slshdedup.bench.corpus import generate_corpus, load_corpus, synth_image
from slshdedup.bench.matrix import (MatrixConfig, run_distortion_matrix,
                                    write_csv)

# ---------------------------------------------------------------- corpus


def test_synth_image_deterministic():
    a = synth_image(7, 3, size=64)
    b = synth_image(7, 3, size=64)
    assert a.dtype == np.uint8 and a.shape == (64, 64, 3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, synth_image(7, 4, size=64))
    assert not np.array_equal(a, synth_image(8, 3, size=64))


def test_generate_corpus_round_trip(tmp_path):
    paths = generate_corpus(str(tmp_path), count=5, seed=2, size=32)
    assert len(paths) == 5
    assert load_corpus(str(tmp_path)) == paths
    from slshdedup import features
    img = features.load_image(paths[0])
    assert np.array_equal(img.to_array(), synth_image(2, 0, size=32))


# ------------------------------------------------------------ distortions


def test_grids_shape():
    assert set(distort.GRIDS) == {
        "blur", "brighten", "gaussian_noise", "resize", "saturate",
        "sharpen", "solarize", "salt_pepper"}
    for kind, grid in distort.GRIDS.items():
        assert len(grid) == distort.LEVELS, kind


IDENTITY_LEVEL_KINDS = ["brighten", "gaussian_noise", "resize", "saturate",
                        "sharpen", "solarize", "salt_pepper"]


@pytest.mark.parametrize("kind", IDENTITY_LEVEL_KINDS)
def test_level_zero_is_identity(kind):
    img = synth_image(1, 0, size=48)
    out = distort.apply_distortion(kind, 0, img, seed=9)
    assert np.array_equal(out, img)
    assert out is not img  # caller may mutate its copy freely


def test_blur_has_no_identity_level():
    # blur's grid starts at a real 3x3 kernel; level 0 must change pixels
    img = synth_image(1, 1, size=48)
    out = distort.apply_distortion("blur", 0, img)
    assert out.shape == img.shape
    assert not np.array_equal(out, img)


def test_randomized_kinds_are_seed_deterministic():
    img = synth_image(3, 0, size=48)
    for kind in ("gaussian_noise", "salt_pepper"):
        a = distort.apply_distortion(kind, 3, img, seed=5)
        b = distort.apply_distortion(kind, 3, img, seed=5)
        c = distort.apply_distortion(kind, 3, img, seed=6)
        assert np.array_equal(a, b), kind
        assert not np.array_equal(a, c), kind


def test_salt_pepper_touches_expected_fraction():
    img = np.full((100, 100, 3), 128, dtype=np.uint8)
    out = distort.apply_distortion("salt_pepper", 4, img, seed=1)
    changed = np.any(out != img, axis=2).sum()
    # grid level 4 = 10% of pixels, forced to 0 or 255 on all channels
    assert changed == 1000
    assert set(np.unique(out[np.any(out != img, axis=2)])) <= {0, 255}


def test_solarize_inverts_above_threshold():
    img = np.array([[[10, 160, 200]]], dtype=np.uint8)
    out = distort.apply_distortion("solarize", 2, img)  # threshold 160
    assert out.tolist() == [[[10, 95, 55]]]


def test_unknown_kind_and_level_rejected():
    img = synth_image(1, 0, size=16)
    with pytest.raises(distort.DistortError):
        distort.apply_distortion("swirl", 0, img)
    with pytest.raises(distort.DistortError):
        distort.apply_distortion("blur", 5, img)


# ------------------------------------------------------------------ stats


def test_collect_matches_statistics_module():
    rng = np.random.default_rng(11)
    samples = [float(x) for x in rng.uniform(0.5, 3.0, size=40)]
    stats = timing.collect(samples)
    assert stats.n == 40
    assert math.isclose(stats.mean, statistics.fmean(samples))
    assert math.isclose(stats.median, statistics.median(samples))
    assert math.isclose(stats.stdev, statistics.stdev(samples))
    assert stats.lo == min(samples) and stats.hi == max(samples)


def test_linear_fit_recovers_exact_line():
    xs = [1.0, 2.0, 5.0, 9.0, 12.0]
    ys = [3.0 * x + 2.0 for x in xs]
    a, b, r2 = timing.linear_fit(xs, ys)
    assert math.isclose(a, 3.0, abs_tol=1e-9)
    assert math.isclose(b, 2.0, abs_tol=1e-9)
    assert math.isclose(r2, 1.0, abs_tol=1e-12)


def test_linear_fit_r2_matches_correlation():
    rng = np.random.default_rng(4)
    xs = list(rng.uniform(0, 10, size=30))
    ys = [2.0 * x + 1.0 + rng.normal(0, 2.0) for x in xs]
    _, _, r2 = timing.linear_fit(xs, ys)
    corr = float(np.corrcoef(xs, ys)[0, 1])
    assert math.isclose(r2, corr * corr, rel_tol=1e-9)
    assert r2 < 1.0


def test_measure_counts_trials():
    stats = timing.measure(lambda: sum(range(100)), repeat=5, number=3)
    assert stats.n == 5
    assert stats.lo > 0.0


def test_hash_timing_grid_rows():
    rows = timing.hash_timing(dim=32, seed=3, repeat=3, number=2)
    assert [(r["tables"], r["bits"]) for r in rows] == timing.HASH_GRID
    for r in rows:
        assert r["work"] == r["tables"] * r["bits"]
        assert 0.0 < r["min_us"] <= r["median_us"] <= r["max_us"]


def test_query_timing_small_sizes():
    rows = timing.query_timing(tables=3, bits=12, seed=5,
                               sizes=[50, 200], queries=30, dim=32)
    assert [r["size"] for r in rows] == [50, 200]
    for r in rows:
        assert r["n"] == 30
        assert r["avg_us"] > 0.0
    assert timing.query_flatness(rows) >= 1.0


# ----------------------------------------------------------------- matrix


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    generate_corpus(str(out), count=100, seed=6, size=64)
    return str(out)


def test_matrix_identity_and_determinism(small_corpus, tmp_path):
    config = MatrixConfig(tables=4, bits=16, threshold=3, seed=6,
                          kinds=("brighten",))
    result = run_distortion_matrix(small_corpus, config)
    assert result.images == 100
    # level 0 of brighten is the identity: every table must match
    assert result.matches[("brighten", 0)] == [4] * 100
    assert result.frac_at_least("brighten", 0, 4) == 1.0
    # mild +10 brightness cancels in the features; most images hold
    assert result.frac_at_least("brighten", 1, 3) >= 0.8
    # synthetic images are near-orthogonal: unrelated pairs stay clean
    assert result.unrelated_clean / result.unrelated_pairs >= 0.99

    again = run_distortion_matrix(small_corpus, config)
    assert again.matches == result.matches

    csv_path = write_csv(result, str(tmp_path))
    lines = open(csv_path).read().splitlines()
    # header + 5 levels + trailing unrelated-pairs row
    assert len(lines) == 7
    assert lines[1].startswith("brighten,0,")


def test_matrix_rejects_tiny_corpus(tmp_path):
    generate_corpus(str(tmp_path), count=3, seed=1, size=32)
    with pytest.raises(ValueError):
        run_distortion_matrix(str(tmp_path), MatrixConfig())


# -------------------------------------------------------------------- qos


def test_qos_query_and_index_modes(tmp_path):
    with qos.hosted_server(str(tmp_path / "data")) as server:
        res = qos.run_qos_sync("127.0.0.1", server.port, "query", 32)
        assert (res.ok, res.failures) == (32, 0)
        assert res.latency.n == 32
        assert res.elapsed_s < 10.0

        # index mode uploads a blob and fetches it back inside the worker
        res = qos.run_qos_sync("127.0.0.1", server.port, "index", 16)
        assert (res.ok, res.failures) == (16, 0)
    with pytest.raises(ValueError):
        qos.run_qos_sync("127.0.0.1", 1, "banana", 1)
