"""Multi-table near-duplicate index with generational rollover.

The server keeps t hash tables per generation, mapping SLSH digests to
image ids.  Queries build a collision shortlist per generation; the
dedup decision takes the top entry at threshold c.  When the newest
generation fills to capacity a fresh generation (new seeds, empty
tables) is started; old generations stay queryable but never receive
new inserts.

Collision counts are always per generation: parameters differ across
generations, so counts are incomparable and are never summed.

Persistence is snapshot + append-only insert log.  Snapshots are one
file per generation; the log is replayed over the latest snapshots on
restart, and a torn tail record (crash mid-append) is detected by CRC
and dropped.
"""

from __future__ import annotations

import math
import os
import struct
import time
import zlib
from dataclasses import dataclass, field

from .slsh import LshParams, SlshDigest, decode_params, encode_params, gen_params

SNAPSHOT_MAGIC = b"SLSHIDX1"
LOG_NAME = "inserts.log"


class DedupIndexError(Exception):
    """Base class for index failures."""


class DuplicateId(DedupIndexError):
    """image_id already present in some generation."""


class WrongDigestCount(DedupIndexError):
    """A digest list does not have exactly t entries."""


class MissingGeneration(DedupIndexError):
    """Query did not supply digests for a live generation."""


class StaleGeneration(DedupIndexError):
    """Insert targeted a generation that is no longer the newest."""


class MalformedSnapshot(DedupIndexError):
    """Snapshot or log bytes are truncated or inconsistent."""


@dataclass(frozen=True)
class DedupConfig:
    """Index shape: t tables of h bits, duplicate threshold c."""

    t: int = 6
    h: int = 24
    c: int = 0  # 0 means "default": ceil((t+1)/2)
    rollover_capacity: int = 0  # 0 means "default": 2^(h-2)

    def __post_init__(self) -> None:
        if self.c == 0:
            object.__setattr__(self, "c", math.ceil((self.t + 1) / 2))
        if self.rollover_capacity == 0:
            object.__setattr__(self, "rollover_capacity", 2 ** (self.h - 2))
        if self.t < 1:
            raise DedupIndexError(f"t must be >= 1, got {self.t}")
        if not 1 <= self.c <= self.t:
            raise DedupIndexError(f"c must be in [1, t={self.t}], got {self.c}")
        if self.rollover_capacity < 1:
            raise DedupIndexError("rollover_capacity must be >= 1")


@dataclass
class TableGeneration:
    generation_id: int
    params: list[LshParams]
    # One multimap per table: digest bytes -> image ids in insertion order.
    tables: list[dict[bytes, list[str]]]
    created_at: float
    entry_count: int = 0


@dataclass(frozen=True)
class ShortlistEntry:
    image_id: str
    collisions: int
    generation_id: int


@dataclass(frozen=True)
class Unique:
    pass


@dataclass(frozen=True)
class Duplicate:
    image_id: str
    collisions: int


def decide(shortlist: list[ShortlistEntry], config: DedupConfig) -> Unique | Duplicate:
    """Duplicate with the top entry iff its collisions reach c."""
    if shortlist and shortlist[0].collisions >= config.c:
        top = shortlist[0]
        return Duplicate(image_id=top.image_id, collisions=top.collisions)
    return Unique()


class DedupIndex:
    """In-memory index; persistence lives in snapshot/log helpers below.

    Concurrency contract: many readers or one writer.  query() never
    mutates; insert()/rollover() require exclusive access (the server
    serializes them on its writer lock).
    """

    def __init__(
        self,
        config: DedupConfig,
        dim: int = 160,
        seed_fn=None,
    ) -> None:
        self.config = config
        self.dim = dim
        self._seed_fn = seed_fn if seed_fn is not None else lambda: os.urandom(32)
        self.generations: list[TableGeneration] = []
        self._id_seq: dict[str, int] = {}  # global insertion sequence per image
        self._next_seq = 0
        self._new_generation()

    # ------------------------------------------------------------ state

    @property
    def newest(self) -> TableGeneration:
        return self.generations[-1]

    def generation_ids(self) -> list[int]:
        return [g.generation_id for g in self.generations]

    def params_by_generation(self) -> list[tuple[int, list[LshParams]]]:
        return [(g.generation_id, list(g.params)) for g in self.generations]

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._id_seq

    def __len__(self) -> int:
        return len(self._id_seq)

    def insertion_seq(self, image_id: str) -> int:
        return self._id_seq[image_id]

    def _new_generation(self) -> TableGeneration:
        gen_id = self.generations[-1].generation_id + 1 if self.generations else 1
        params = [
            gen_params(self._seed_fn(), self.dim, self.config.h)
            for _ in range(self.config.t)
        ]
        gen = TableGeneration(
            generation_id=gen_id,
            params=params,
            tables=[{} for _ in range(self.config.t)],
            created_at=time.time(),
        )
        self.generations.append(gen)
        return gen

    def rollover(self) -> TableGeneration:
        """Start a fresh generation.  Old generations stay queryable."""
        return self._new_generation()

    # ----------------------------------------------------------- writes

    def insert(self, image_id: str, digests: list[SlshDigest]) -> None:
        """Insert into the newest generation; auto-rolls at capacity."""
        if len(digests) != self.config.t:
            raise WrongDigestCount(
                f"need {self.config.t} digests, got {len(digests)}"
            )
        if image_id in self._id_seq:
            raise DuplicateId(image_id)
        gen = self.newest
        assert gen.entry_count < self.config.rollover_capacity
        for x, d in enumerate(digests):
            gen.tables[x].setdefault(d.digest, []).append(image_id)
        gen.entry_count += 1
        self._id_seq[image_id] = self._next_seq
        self._next_seq += 1
        if gen.entry_count >= self.config.rollover_capacity:
            self.rollover()

    # ------------------------------------------------------------ reads

    def query(
        self, digest_sets: dict[int, list[SlshDigest]]
    ) -> list[ShortlistEntry]:
        """Collision shortlist over all generations, read-only.

        digest_sets maps generation_id -> t digests computed under that
        generation's params.  Every live generation must be covered.
        """
        for gen in self.generations:
            if gen.generation_id not in digest_sets:
                raise MissingGeneration(
                    f"no digests for generation {gen.generation_id}"
                )
            if len(digest_sets[gen.generation_id]) != self.config.t:
                raise WrongDigestCount(
                    f"generation {gen.generation_id}: need {self.config.t} digests"
                )
        entries: list[ShortlistEntry] = []
        for gen in self.generations:
            digests = digest_sets[gen.generation_id]
            counts: dict[str, int] = {}
            for x, d in enumerate(digests):
                for image_id in gen.tables[x].get(d.digest, ()):
                    counts[image_id] = counts.get(image_id, 0) + 1
            entries.extend(
                ShortlistEntry(
                    image_id=image_id,
                    collisions=n,
                    generation_id=gen.generation_id,
                )
                for image_id, n in counts.items()
            )
        entries.sort(key=lambda e: (-e.collisions, self._id_seq[e.image_id]))
        return entries

    def state_hash(self) -> bytes:
        """Digest of the canonical serialization (read-only invariant)."""
        import hashlib

        acc = hashlib.sha256()
        for gen in self.generations:
            acc.update(_snapshot_bytes(self, gen))
        return acc.digest()


# ------------------------------------------------------------- snapshots

def _snapshot_bytes(index: DedupIndex, gen: TableGeneration) -> bytes:
    out = [SNAPSHOT_MAGIC, struct.pack(">III", gen.generation_id, index.config.t, index.config.h)]
    for p in gen.params:
        out.append(encode_params(p))
    for table in gen.tables:
        out.append(struct.pack(">I", len(table)))
        for digest, ids in table.items():
            out.append(digest)
            out.append(struct.pack(">I", len(ids)))
            for image_id in ids:
                raw = image_id.encode("utf-8")
                out.append(struct.pack(">HQ", len(raw), index._id_seq[image_id]))
                out.append(raw)
    return b"".join(out)


def _gen_path(dir_path: str, gen_id: int) -> str:
    return os.path.join(dir_path, f"gen-{gen_id:08d}.idx")


def write_snapshot(index: DedupIndex, dir_path: str) -> None:
    """Write all generations atomically and reset the insert log."""
    os.makedirs(dir_path, exist_ok=True)
    for gen in index.generations:
        path = _gen_path(dir_path, gen.generation_id)
        tmp = path + ".tmp"
        with open(tmp, "wb") as f:
            f.write(_snapshot_bytes(index, gen))
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    # Snapshot now covers everything in the log: start a fresh one.
    log_tmp = os.path.join(dir_path, LOG_NAME + ".tmp")
    with open(log_tmp, "wb") as f:
        f.flush()
        os.fsync(f.fileno())
    os.replace(log_tmp, os.path.join(dir_path, LOG_NAME))
    _fsync_dir(dir_path)


def _fsync_dir(dir_path: str) -> None:
    fd = os.open(dir_path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def _parse_snapshot(buf: bytes, dim: int) -> tuple[TableGeneration, dict[str, int]]:
    if len(buf) < 8 + 12 or buf[:8] != SNAPSHOT_MAGIC:
        raise MalformedSnapshot("bad magic or truncated header")
    gen_id, t, h = struct.unpack(">III", buf[8:20])
    off = 20
    params = []
    from .slsh import PARAMS_WIRE_LEN

    for _ in range(t):
        if off + PARAMS_WIRE_LEN > len(buf):
            raise MalformedSnapshot("truncated params")
        params.append(decode_params(buf[off : off + PARAMS_WIRE_LEN]))
        off += PARAMS_WIRE_LEN
        if params[-1].dim != dim or params[-1].bits != h:
            raise MalformedSnapshot("params do not match index shape")
    tables: list[dict[bytes, list[str]]] = []
    seqs: dict[str, int] = {}
    for _ in range(t):
        if off + 4 > len(buf):
            raise MalformedSnapshot("truncated table header")
        (n_buckets,) = struct.unpack(">I", buf[off : off + 4])
        off += 4
        table: dict[bytes, list[str]] = {}
        for _ in range(n_buckets):
            if off + 36 > len(buf):
                raise MalformedSnapshot("truncated bucket")
            digest = buf[off : off + 32]
            (n_ids,) = struct.unpack(">I", buf[off + 32 : off + 36])
            off += 36
            ids = []
            for _ in range(n_ids):
                if off + 10 > len(buf):
                    raise MalformedSnapshot("truncated id record")
                id_len, seq = struct.unpack(">HQ", buf[off : off + 10])
                off += 10
                if off + id_len > len(buf):
                    raise MalformedSnapshot("truncated id bytes")
                image_id = buf[off : off + id_len].decode("utf-8")
                off += id_len
                ids.append(image_id)
                seqs[image_id] = seq
            table[digest] = ids
        tables.append(table)
    if off != len(buf):
        raise MalformedSnapshot(f"{len(buf) - off} trailing bytes")
    entry_ids = set()
    for ids in tables[0].values():
        entry_ids.update(ids)
    gen = TableGeneration(
        generation_id=gen_id,
        params=params,
        tables=tables,
        created_at=time.time(),
        entry_count=len(entry_ids),
    )
    return gen, seqs


# ------------------------------------------------------------ insert log

def append_insert_log(
    dir_path: str, image_id: str, generation_id: int, digests: list[SlshDigest]
) -> None:
    """Append one insert record (fsynced) before it is applied in memory."""
    raw_id = image_id.encode("utf-8")
    body = struct.pack(">IH", generation_id, len(raw_id)) + raw_id
    body += struct.pack(">H", len(digests))
    for d in digests:
        body += d.digest
    rec = struct.pack(">I", len(body)) + body + struct.pack(">I", zlib.crc32(body))
    path = os.path.join(dir_path, LOG_NAME)
    with open(path, "ab") as f:
        f.write(rec)
        f.flush()
        os.fsync(f.fileno())


def read_insert_log(dir_path: str) -> list[tuple[str, int, list[SlshDigest]]]:
    """Replayable records; a torn tail record is dropped, not an error."""
    path = os.path.join(dir_path, LOG_NAME)
    if not os.path.exists(path):
        return []
    with open(path, "rb") as f:
        buf = f.read()
    out: list[tuple[str, int, list[SlshDigest]]] = []
    off = 0
    while off < len(buf):
        if off + 4 > len(buf):
            break  # torn length prefix
        (body_len,) = struct.unpack(">I", buf[off : off + 4])
        if off + 4 + body_len + 4 > len(buf):
            break  # torn body or crc
        body = buf[off + 4 : off + 4 + body_len]
        (crc,) = struct.unpack(">I", buf[off + 4 + body_len : off + 8 + body_len])
        if zlib.crc32(body) != crc:
            break  # corrupt tail
        gen_id, id_len = struct.unpack(">IH", body[:6])
        image_id = body[6 : 6 + id_len].decode("utf-8")
        (n_digests,) = struct.unpack(">H", body[6 + id_len : 8 + id_len])
        digests = []
        pos = 8 + id_len
        for _ in range(n_digests):
            digests.append(SlshDigest(digest=body[pos : pos + 32]))
            pos += 32
        out.append((image_id, gen_id, digests))
        off += 8 + body_len
    return out


def load_index(
    dir_path: str, config: DedupConfig, dim: int = 160, seed_fn=None
) -> DedupIndex:
    """Rebuild the index from snapshots, then replay the insert log."""
    index = DedupIndex.__new__(DedupIndex)
    index.config = config
    index.dim = dim
    index._seed_fn = seed_fn if seed_fn is not None else (lambda: os.urandom(32))
    index.generations = []
    index._id_seq = {}
    index._next_seq = 0

    paths = sorted(
        p for p in os.listdir(dir_path)
        if p.startswith("gen-") and p.endswith(".idx")
    ) if os.path.isdir(dir_path) else []
    for name in paths:
        with open(os.path.join(dir_path, name), "rb") as f:
            gen, seqs = _parse_snapshot(f.read(), dim)
        if gen.params and gen.params[0].bits != config.h:
            raise MalformedSnapshot("snapshot h does not match config")
        if len(gen.params) != config.t:
            raise MalformedSnapshot("snapshot t does not match config")
        index.generations.append(gen)
        index._id_seq.update(seqs)
    if not index.generations:
        index._new_generation()
        return index
    index.generations.sort(key=lambda g: g.generation_id)
    if index._id_seq:
        index._next_seq = max(index._id_seq.values()) + 1

    for image_id, gen_id, digests in read_insert_log(dir_path):
        if image_id in index._id_seq:
            continue  # already folded into a snapshot
        gen = next(
            (g for g in index.generations if g.generation_id == gen_id), None
        )
        # Replay targets the generation recorded at append time; records
        # for unknown generations or with the wrong shape are dropped.
        if gen is None or len(digests) != config.t:
            continue
        for x, d in enumerate(digests):
            gen.tables[x].setdefault(d.digest, []).append(image_id)
        gen.entry_count += 1
        index._id_seq[image_id] = index._next_seq
        index._next_seq += 1

    # Crash between a capacity-filling insert and its rollover: repair here.
    if index.newest.entry_count >= config.rollover_capacity:
        index.rollover()
    return index
