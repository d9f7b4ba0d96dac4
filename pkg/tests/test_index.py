"""Index tests.

Shortlists from the table structure are checked against a naive O(N*t)
scan over every stored digest, including across generation rollovers.
"""

from __future__ import annotations

import os

import numpy as np
import pytest

from slshdedup.index import (
    DedupConfig,
    DedupIndex,
    DedupIndexError,
    Duplicate,
    DuplicateId,
    MissingGeneration,
    Unique,
    WrongDigestCount,
    append_insert_log,
    decide,
    load_index,
    read_insert_log,
    write_snapshot,
)
from slshdedup.slsh import SlshDigest


def rand_digest(rng: np.random.Generator) -> SlshDigest:
    return SlshDigest(digest=rng.bytes(32))


def rand_digests(rng: np.random.Generator, t: int) -> list[SlshDigest]:
    return [rand_digest(rng) for _ in range(t)]


def seeded_index(config: DedupConfig, seed: int = 0) -> DedupIndex:
    rng = np.random.default_rng(seed)
    return DedupIndex(config, dim=16, seed_fn=lambda: rng.bytes(32))


class NaiveStore:
    """Brute-force oracle: linear scan comparing stored digests directly."""

    def __init__(self, t: int) -> None:
        self.t = t
        self.rows: list[tuple[str, int, list[bytes]]] = []

    def insert(self, image_id: str, gen_id: int, digests: list[SlshDigest]) -> None:
        self.rows.append((image_id, gen_id, [d.digest for d in digests]))

    def query(self, digest_sets: dict[int, list[SlshDigest]]):
        hits = []
        for pos, (image_id, gen_id, stored) in enumerate(self.rows):
            q = [d.digest for d in digest_sets[gen_id]]
            n = sum(1 for x in range(self.t) if stored[x] == q[x])
            if n >= 1:
                hits.append((image_id, n, gen_id, pos))
        hits.sort(key=lambda e: (-e[1], e[3]))
        return [(h[0], h[1], h[2]) for h in hits]


def test_insert_then_query_full_collision():
    cfg = DedupConfig(t=6, h=24)
    idx = seeded_index(cfg)
    rng = np.random.default_rng(1)
    d = rand_digests(rng, 6)
    idx.insert("img-1", d)
    out = idx.query({1: d})
    assert [(e.image_id, e.collisions, e.generation_id) for e in out] == [("img-1", 6, 1)]


def test_multimap_bucket_semantics():
    cfg = DedupConfig(t=3, h=24)
    idx = seeded_index(cfg)
    rng = np.random.default_rng(2)
    shared = rand_digest(rng)
    a = [shared, rand_digest(rng), rand_digest(rng)]
    b = [shared, rand_digest(rng), rand_digest(rng)]
    idx.insert("a", a)
    idx.insert("b", b)
    out = idx.query({1: [shared, rand_digest(rng), rand_digest(rng)]})
    assert {(e.image_id, e.collisions) for e in out} == {("a", 1), ("b", 1)}


def test_insert_validation():
    cfg = DedupConfig(t=4, h=24)
    idx = seeded_index(cfg)
    rng = np.random.default_rng(3)
    d = rand_digests(rng, 4)
    idx.insert("x", d)
    with pytest.raises(DuplicateId):
        idx.insert("x", rand_digests(rng, 4))
    with pytest.raises(WrongDigestCount):
        idx.insert("y", rand_digests(rng, 3))
    with pytest.raises(WrongDigestCount):
        idx.query({1: rand_digests(rng, 5)})


def test_one_table_flip_gives_t_minus_1():
    cfg = DedupConfig(t=6, h=24)
    idx = seeded_index(cfg)
    rng = np.random.default_rng(4)
    d = rand_digests(rng, 6)
    idx.insert("img", d)
    for flip in range(6):
        q = list(d)
        q[flip] = rand_digest(rng)
        out = idx.query({1: q})
        assert (out[0].image_id, out[0].collisions) == ("img", 5)


def test_decide_boundaries_and_tiebreak():
    cfg = DedupConfig(t=6, h=24)  # c = 4
    assert cfg.c == 4
    idx = seeded_index(cfg)
    rng = np.random.default_rng(5)
    d_a = rand_digests(rng, 6)
    idx.insert("A", d_a)
    # exactly c collisions -> Duplicate
    q = list(d_a)
    q[0], q[1] = rand_digest(rng), rand_digest(rng)
    out = idx.query({1: q})
    assert out[0].collisions == 4
    assert decide(out, cfg) == Duplicate(image_id="A", collisions=4)
    # c - 1 -> Unique
    q[2] = rand_digest(rng)
    out = idx.query({1: q})
    assert out[0].collisions == 3
    assert decide(out, cfg) == Unique()
    assert decide([], cfg) == Unique()
    # tie on collisions: older insertion wins
    idx.insert("B", d_a)  # same digests as A, inserted later
    out = idx.query({1: d_a})
    assert [e.image_id for e in out[:2]] == ["A", "B"]
    assert decide(out, cfg) == Duplicate(image_id="A", collisions=6)


def test_decide_scale_free_in_c():
    base = DedupConfig(t=6, h=24, c=3)
    stricter = DedupConfig(t=6, h=24, c=5)
    idx = seeded_index(base)
    rng = np.random.default_rng(6)
    for i in range(50):
        idx.insert(f"i{i}", rand_digests(rng, 6))
    for i in range(50):
        q = {1: rand_digests(rng, 6)}
        if isinstance(decide(idx.query(q), stricter), Duplicate):
            assert isinstance(decide(idx.query(q), base), Duplicate)


def test_rollover_counter_semantics():
    cfg = DedupConfig(t=2, h=24, rollover_capacity=4)
    idx = seeded_index(cfg)
    rng = np.random.default_rng(7)
    for i in range(4):
        idx.insert(f"img{i}", rand_digests(rng, 2))
    assert idx.generation_ids() == [1, 2]
    assert idx.generations[0].entry_count == 4
    idx.insert("img4", rand_digests(rng, 2))
    assert idx.generations[1].entry_count == 1
    # params differ between generations
    seeds1 = {p.seed for p in idx.generations[0].params}
    seeds2 = {p.seed for p in idx.generations[1].params}
    assert not seeds1 & seeds2


def test_query_requires_all_generations():
    cfg = DedupConfig(t=2, h=24, rollover_capacity=2)
    idx = seeded_index(cfg)
    rng = np.random.default_rng(8)
    d0 = rand_digests(rng, 2)
    idx.insert("old0", d0)
    idx.insert("old1", rand_digests(rng, 2))  # fills gen 1, rolls to gen 2
    with pytest.raises(MissingGeneration):
        idx.query({1: d0})
    # pre-rollover image still found when old-generation digests supplied
    out = idx.query({1: d0, 2: rand_digests(rng, 2)})
    assert out[0].image_id == "old0" and out[0].collisions == 2
    assert out[0].generation_id == 1


def test_oracle_equivalence_500_inserts_100_queries():
    cfg = DedupConfig(t=6, h=24, rollover_capacity=120)
    idx = seeded_index(cfg, seed=9)
    naive = NaiveStore(t=6)
    rng = np.random.default_rng(10)
    stored: list[tuple[int, list[SlshDigest]]] = []
    for i in range(500):
        gen_id = idx.newest.generation_id
        d = rand_digests(rng, 6)
        # quarter of inserts share digests with an earlier image to
        # populate multi-entry buckets
        if i > 0 and rng.random() < 0.25:
            base_gen, base = stored[int(rng.integers(len(stored)))]
            if base_gen == gen_id:
                d = [base[x] if rng.random() < 0.5 else d[x] for x in range(6)]
        idx.insert(f"img{i:04d}", d)
        naive.insert(f"img{i:04d}", gen_id, d)
        stored.append((gen_id, d))

    live = idx.generation_ids()
    for _ in range(100):
        digest_sets: dict[int, list[SlshDigest]] = {}
        for gen_id in live:
            candidates = [d for g, d in stored if g == gen_id]
            if candidates and rng.random() < 0.8:
                base = candidates[int(rng.integers(len(candidates)))]
                flips = int(rng.integers(0, 7))
                q = list(base)
                for x in rng.choice(6, size=flips, replace=False):
                    q[x] = rand_digest(rng)
                digest_sets[gen_id] = q
            else:
                digest_sets[gen_id] = rand_digests(rng, 6)
        got = [(e.image_id, e.collisions, e.generation_id)
               for e in idx.query(digest_sets)]
        assert got == naive.query(digest_sets)


def test_monotonicity_unrelated_insert():
    cfg = DedupConfig(t=6, h=24)
    idx = seeded_index(cfg, seed=11)
    rng = np.random.default_rng(12)
    d = rand_digests(rng, 6)
    idx.insert("target", d)
    q = {1: d}
    before = {e.image_id: e.collisions for e in idx.query(q)}
    for i in range(20):
        idx.insert(f"noise{i}", rand_digests(rng, 6))
    after = {e.image_id: e.collisions for e in idx.query(q)}
    for image_id, n in before.items():
        assert after[image_id] >= n


def test_query_is_read_only():
    cfg = DedupConfig(t=4, h=24)
    idx = seeded_index(cfg, seed=13)
    rng = np.random.default_rng(14)
    for i in range(30):
        idx.insert(f"i{i}", rand_digests(rng, 4))
    h0 = idx.state_hash()
    for _ in range(20):
        idx.query({1: rand_digests(rng, 4)})
    assert idx.state_hash() == h0


def test_snapshot_round_trip_and_log_replay(tmp_path):
    cfg = DedupConfig(t=3, h=24, rollover_capacity=10)
    idx = seeded_index(cfg, seed=15)
    rng = np.random.default_rng(16)
    rows = []
    for i in range(25):
        d = rand_digests(rng, 3)
        rows.append((f"img{i}", d))
        idx.insert(f"img{i}", d)
    d = str(tmp_path / "idx")
    write_snapshot(idx, d)
    loaded = load_index(d, cfg, dim=16)
    assert loaded.state_hash() == idx.state_hash()
    assert loaded.generation_ids() == idx.generation_ids()
    assert len(loaded) == len(idx)

    # Now: log two more inserts without snapshotting, reload, verify.
    extra = rand_digests(rng, 3)
    gen_id = idx.newest.generation_id
    append_insert_log(d, "late-1", gen_id, extra)
    append_insert_log(d, "late-2", gen_id, rand_digests(rng, 3))
    idx2 = load_index(d, cfg, dim=16)
    assert "late-1" in idx2 and "late-2" in idx2
    full = {g: rand_digests(rng, 3) for g in idx2.generation_ids()}
    full[gen_id] = extra
    out = idx2.query(full)
    assert out[0].image_id == "late-1" and out[0].collisions == 3


def test_torn_log_tail_dropped(tmp_path):
    cfg = DedupConfig(t=2, h=24)
    idx = seeded_index(cfg, seed=17)
    d = str(tmp_path / "idx")
    write_snapshot(idx, d)
    rng = np.random.default_rng(18)
    append_insert_log(d, "whole", 1, rand_digests(rng, 2))
    append_insert_log(d, "torn", 1, rand_digests(rng, 2))
    log = os.path.join(d, "inserts.log")
    size = os.path.getsize(log)
    with open(log, "r+b") as f:
        f.truncate(size - 7)  # cut into the second record
    records = read_insert_log(d)
    assert [r[0] for r in records] == ["whole"]
    idx2 = load_index(d, cfg, dim=16)
    assert "whole" in idx2 and "torn" not in idx2


def test_restore_repairs_pending_rollover(tmp_path):
    cfg = DedupConfig(t=2, h=24, rollover_capacity=3)
    idx = seeded_index(cfg, seed=19)
    d = str(tmp_path / "idx")
    write_snapshot(idx, d)
    rng = np.random.default_rng(20)
    for i in range(3):  # fills generation 1 exactly, via log only
        append_insert_log(d, f"img{i}", 1, rand_digests(rng, 2))
    idx2 = load_index(d, cfg, dim=16)
    assert idx2.generation_ids() == [1, 2]
    assert idx2.generations[0].entry_count == 3
    assert idx2.newest.entry_count == 0


def test_config_validation():
    cfg = DedupConfig(t=6, h=24)
    assert cfg.c == 4 and cfg.rollover_capacity == 2**22
    assert DedupConfig(t=5, h=24).c == 3
    with pytest.raises(DedupIndexError):
        DedupConfig(t=4, h=24, c=5)
    with pytest.raises(DedupIndexError):
        DedupConfig(t=0, h=24)
