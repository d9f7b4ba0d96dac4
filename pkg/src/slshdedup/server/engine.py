"""Server engine: message dispatch, exchanges, and durable commits.

Sans-io core: handle()/poll() consume decoded messages and return a
list of actions (sends and closes) for the transport shell to execute.
All state mutation happens synchronously inside these calls, so a
single-threaded event loop gets linearizable state transitions without
explicit locks.

Durability: every committed state change is an oplog record fsynced
before the in-memory apply (write-ahead).  The commit point of an
upload is its oplog append; the ACK merely reports it.  Rollover seeds
are logged the same way, so replay regenerates identical table
generations.  crash_hook (tests only) is invoked with a step label
before each step of the upload commit sequence, letting a harness
simulate power loss at every boundary.
"""

from __future__ import annotations

import json
import hashlib
import os
import secrets
import shutil
import time
from collections import deque
from dataclasses import dataclass, field

from ..index import (
    DedupConfig,
    DedupIndex,
    DedupIndexError,
    Duplicate,
    decide,
    load_index,
    write_snapshot,
)
from ..protocol import messages as m
from ..protocol.frames import ProtocolError
from ..slsh import SlshDigest, encode_params
from . import oplog
from .blobstore import BlobStore
from .state import (
    DEFAULT_QUOTA,
    ImageRecord,
    NoHolderOnline,
    TokenBucket,
    UserRecord,
    select_counterpart,
)

# Index-internal auto-rollover is disabled (capacity pushed out of
# reach); the engine rolls explicitly so that every new generation's
# seeds hit the oplog before the generation exists.
_UNREACHABLE_CAPACITY = 1 << 62


class EngineError(Exception):
    pass


class CorruptSnapshot(EngineError):
    """Persistent state is damaged; refuse to start."""


@dataclass(frozen=True)
class ServerConfig:
    tables: int = 6
    hash_bits: int = 24
    threshold: int = 0  # 0 -> majority default from DedupConfig
    dim: int = 160
    rate: float = 1.0
    burst: float = 60.0
    quota_bytes: int = DEFAULT_QUOTA
    rollover_capacity: int = 0  # 0 -> 2^(hash_bits - 2)
    exchange_deadline: float = 30.0

    def capacity(self) -> int:
        return self.rollover_capacity or 2 ** (self.hash_bits - 2)


@dataclass(frozen=True)
class Send:
    conn_id: int
    msg: object


@dataclass(frozen=True)
class Close:
    conn_id: int


Action = Send | Close


@dataclass
class _Conn:
    conn_id: int
    user_id: str = ""
    serving: bool = False
    pending: dict = field(default_factory=dict)  # token -> _PendingUpload
    exchanges: set = field(default_factory=set)


@dataclass
class _PendingUpload:
    user_id: str
    generation_id: int
    digests: tuple  # raw 32-byte digests for the newest generation


_PHASES = ("opened", "params_shared", "pake1", "pake2", "key_wrapped",
           "done", "aborted")


@dataclass
class _Exchange:
    exchange_id: bytes
    image_ref: bytes
    uploader_conn: int
    holder_conn: int
    uploader_user: str
    holder_user: str
    deadline: float
    phase: str = "opened"
    slots: set = field(default_factory=set)

    @property
    def terminal(self) -> bool:
        return self.phase in ("done", "aborted")

    def peer_conn(self, conn_id: int) -> int:
        return self.holder_conn if conn_id == self.uploader_conn else self.uploader_conn


class ServerEngine:
    def __init__(
        self,
        data_dir: str,
        config: ServerConfig = ServerConfig(),
        clock=time.monotonic,
        crash_hook=None,
    ) -> None:
        self.data_dir = data_dir
        self.config = config
        self.clock = clock
        self.crash_hook = crash_hook or (lambda step: None)
        self.faults: set[str] = set()

        os.makedirs(data_dir, exist_ok=True)
        self.blobs = BlobStore(os.path.join(data_dir, "blobs"))
        self.blobs.sweep_tmp()

        self.users: dict[str, UserRecord] = {}
        self.images: dict[bytes, ImageRecord] = {}
        self.conns: dict[int, _Conn] = {}
        self.serving: dict[str, int] = {}  # user -> serving conn
        self.exchanges: dict[bytes, _Exchange] = {}
        self._seed_queue: deque[bytes] = deque()

        self._index_config = DedupConfig(
            t=config.tables,
            h=config.hash_bits,
            c=config.threshold,
            rollover_capacity=_UNREACHABLE_CAPACITY,
        )
        self._restore()

    # ------------------------------------------------------- persistence

    def _pop_seed(self) -> bytes:
        if not self._seed_queue:
            raise EngineError("generation created without logged seeds")
        return self._seed_queue.popleft()

    def _stock_seeds(self, seeds) -> None:
        self._seed_queue.extend(seeds)

    def _current_path(self) -> str:
        return os.path.join(self.data_dir, "CURRENT")

    def _log_path(self) -> str:
        return os.path.join(self.data_dir, "oplog.bin")

    def _restore(self) -> None:
        records = oplog.replay_and_repair(self._log_path())
        snap_name = None
        if os.path.exists(self._current_path()):
            with open(self._current_path(), "r", encoding="utf-8") as f:
                snap_name = f.read().strip()
        if snap_name is not None:
            snap_dir = os.path.join(self.data_dir, snap_name)
            if not os.path.isdir(snap_dir):
                raise CorruptSnapshot(f"CURRENT points at missing {snap_name}")
            try:
                self.index = load_index(
                    snap_dir, self._index_config, self.config.dim,
                    seed_fn=self._pop_seed,
                )
            except Exception as e:
                raise CorruptSnapshot(f"snapshot load failed: {e}") from e
            self._load_meta(os.path.join(snap_dir, "meta.json"))
            self._snap_epoch = int(snap_name.split("-")[1])
        else:
            self._snap_epoch = 0
            self.index = None  # built by the genesis record below

        self.log = oplog.OpLog(self._log_path())
        if self.index is None and not records:
            seeds = tuple(os.urandom(32) for _ in range(self.config.tables))
            self.log.append(oplog.Rollover(generation_id=1, seeds=seeds))
            records = [oplog.Rollover(generation_id=1, seeds=seeds)]
        for rec in records:
            self._replay(rec)
        if self.index is None:
            raise CorruptSnapshot("no snapshot and no genesis record")
        # Crash after a capacity-filling insert, before its rollover
        # record: repair by rolling (and logging) now.
        self._maybe_rollover()

    def _replay(self, rec: oplog.Record) -> None:
        if isinstance(rec, oplog.Rollover):
            if self.index is None:
                if rec.generation_id != 1:
                    raise CorruptSnapshot("first record is not generation 1")
                self._stock_seeds(rec.seeds)
                self.index = DedupIndex(
                    self._index_config, dim=self.config.dim,
                    seed_fn=self._pop_seed,
                )
                return
            if rec.generation_id <= self.index.newest.generation_id:
                return  # already folded into the snapshot
            if rec.generation_id != self.index.newest.generation_id + 1:
                raise CorruptSnapshot(
                    f"generation gap at rollover {rec.generation_id}")
            self._stock_seeds(rec.seeds)
            self.index.rollover()
        elif isinstance(rec, oplog.Upload):
            if self.index is None:
                raise CorruptSnapshot("upload record before genesis")
            image_id = rec.image_ref.hex()
            if image_id in self.index:
                return  # snapshot already holds it
            if rec.generation_id != self.index.newest.generation_id:
                raise CorruptSnapshot(
                    f"upload logged for generation {rec.generation_id}, "
                    f"newest is {self.index.newest.generation_id}")
            self.index.insert(
                image_id, [SlshDigest(d) for d in rec.digests])
            record = ImageRecord(image_ref=rec.image_ref, size=rec.size)
            record.add_holder(rec.user_id)
            self.images[rec.image_ref] = record
            self._user(rec.user_id).quota_used += rec.size
        elif isinstance(rec, oplog.Grant):
            img = self.images.get(rec.image_ref)
            if img is None:
                raise CorruptSnapshot("grant for unknown image")
            img.add_holder(rec.user_id)
            if rec.served_by:
                img.exchange_counts[rec.served_by] = rec.count
        elif isinstance(rec, oplog.Revoke):
            img = self.images.get(rec.image_ref)
            if img is None:
                raise CorruptSnapshot("revoke for unknown image")
            img.remove_holder(rec.user_id)
            if rec.served_by:
                img.exchange_counts[rec.served_by] = rec.count

    def _load_meta(self, path: str) -> None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                meta = json.load(f)
        except (OSError, ValueError) as e:
            raise CorruptSnapshot(f"meta load failed: {e}") from e
        for uid, u in meta.get("users", {}).items():
            rec = self._user(uid)
            rec.quota_used = int(u["quota_used"])
        for ref_hex, img in meta.get("images", {}).items():
            ref = bytes.fromhex(ref_hex)
            record = ImageRecord(
                image_ref=ref,
                size=int(img["size"]),
                access_holders=list(img["holders"]),
                exchange_counts={k: int(v) for k, v in img["counts"].items()},
            )
            self.images[ref] = record

    def _meta_canonical(self) -> bytes:
        meta = {
            # zero-quota users carry no durable state; omitting them keeps
            # the digest equal across live and restored engines
            "users": {
                uid: {"quota_used": u.quota_used}
                for uid, u in sorted(self.users.items())
                if u.quota_used
            },
            "images": {
                ref.hex(): {
                    "size": img.size,
                    "holders": img.access_holders,
                    "counts": dict(sorted(img.exchange_counts.items())),
                }
                for ref, img in sorted(self.images.items())
            },
        }
        return json.dumps(meta, sort_keys=True).encode("utf-8")

    def persist(self) -> None:
        """Write a snapshot and reset the log it subsumes."""
        epoch = self._snap_epoch + 1
        name = f"snap-{epoch:08d}"
        snap_dir = os.path.join(self.data_dir, name)
        if os.path.exists(snap_dir):
            shutil.rmtree(snap_dir)
        write_snapshot(self.index, snap_dir)
        meta_path = os.path.join(snap_dir, "meta.json")
        with open(meta_path, "wb") as f:
            f.write(self._meta_canonical())
            f.flush()
            os.fsync(f.fileno())
        tmp = self._current_path() + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            f.write(name + "\n")
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self._current_path())
        dir_fd = os.open(self.data_dir, os.O_RDONLY)
        try:
            os.fsync(dir_fd)
        finally:
            os.close(dir_fd)
        self.log.reset()
        old = self._snap_epoch
        self._snap_epoch = epoch
        if old:
            shutil.rmtree(
                os.path.join(self.data_dir, f"snap-{old:08d}"),
                ignore_errors=True,
            )

    def close(self) -> None:
        self.log.close()

    def state_digest(self) -> bytes:
        """Canonical digest of committed state (index + metadata)."""
        return hashlib.sha256(
            self.index.state_hash() + self._meta_canonical()
        ).digest()

    # -------------------------------------------------------- connections

    def connect(self, conn_id: int) -> None:
        if conn_id in self.conns:
            raise EngineError(f"conn {conn_id} already registered")
        self.conns[conn_id] = _Conn(conn_id=conn_id)

    def disconnect(self, conn_id: int) -> list[Action]:
        conn = self.conns.pop(conn_id, None)
        if conn is None:
            return []
        if conn.serving and self.serving.get(conn.user_id) == conn_id:
            del self.serving[conn.user_id]
        actions: list[Action] = []
        for exch_id in list(conn.exchanges):
            exch = self.exchanges.get(exch_id)
            if exch is None or exch.terminal:
                continue
            exch.phase = "aborted"
            peer = exch.peer_conn(conn_id)
            if peer in self.conns:
                actions.append(Send(peer, m.Abort(
                    reason=m.Reason.PEER_ABORTED, exchange_id=exch_id)))
        return actions

    def _user(self, user_id: str) -> UserRecord:
        rec = self.users.get(user_id)
        if rec is None:
            rec = UserRecord(
                user_id=user_id,
                rate_bucket=TokenBucket(
                    self.config.burst, self.config.rate, clock=self.clock),
                quota_limit=self.config.quota_bytes,
            )
            self.users[user_id] = rec
        return rec

    # ----------------------------------------------------------- dispatch

    def handle_frame(self, conn_id: int, msg_type: int, body: bytes) -> list[Action]:
        try:
            msg = m.decode(msg_type, body)
        except ProtocolError:
            return self._fail(conn_id, m.Reason.MALFORMED, close=True)
        return self.handle(conn_id, msg)

    def handle(self, conn_id: int, msg) -> list[Action]:
        conn = self.conns.get(conn_id)
        if conn is None:
            raise EngineError(f"unknown conn {conn_id}")
        handler = {
            m.Hello: self._on_hello,
            m.GetParams: self._on_get_params,
            m.UploadHashes: self._on_upload_hashes,
            m.UploadCt: self._on_upload_ct,
            m.SlshParamShare: self._on_exchange_msg,
            m.PakeMsg: self._on_exchange_msg,
            m.WrappedKey: self._on_exchange_msg,
            m.FetchCt: self._on_fetch_ct,
            m.Abort: self._on_abort,
        }.get(type(msg))
        if handler is None:
            # server-emitted types arriving from a client
            return self._fail(conn_id, m.Reason.MALFORMED, close=True)
        if not isinstance(msg, m.Hello) and not conn.user_id:
            return self._fail(conn_id, m.Reason.MALFORMED, close=True)
        return handler(conn, msg)

    def _fail(self, conn_id: int, reason: m.Reason, close: bool = False,
              exchange_id: bytes = m.NO_EXCHANGE) -> list[Action]:
        actions: list[Action] = [
            Send(conn_id, m.Abort(reason=reason, exchange_id=exchange_id))
        ]
        if close:
            actions.append(Close(conn_id))
        return actions

    def _on_hello(self, conn: _Conn, msg: m.Hello) -> list[Action]:
        if conn.user_id:
            return self._fail(conn.conn_id, m.Reason.MALFORMED, close=True)
        conn.user_id = msg.user_id
        self._user(msg.user_id)
        if msg.serve:
            conn.serving = True
            self.serving[msg.user_id] = conn.conn_id
        return [Send(conn.conn_id, m.Ack())]

    def _on_get_params(self, conn: _Conn, msg: m.GetParams) -> list[Action]:
        gens = tuple(
            (gen_id, tuple(encode_params(p) for p in params))
            for gen_id, params in self.index.params_by_generation()
        )
        return [Send(conn.conn_id, m.Params(generations=gens))]

    # ------------------------------------------------------------ uploads

    def _on_upload_hashes(self, conn: _Conn, msg: m.UploadHashes) -> list[Action]:
        if msg.user_id != conn.user_id:
            return self._fail(conn.conn_id, m.Reason.MALFORMED, close=True)
        user = self._user(conn.user_id)
        if not user.rate_bucket.try_take(1.0):
            return self._fail(conn.conn_id, m.Reason.RATE_LIMITED)

        digest_sets = {
            gen_id: [SlshDigest(d) for d in digests]
            for gen_id, digests in msg.digest_sets
        }
        try:
            shortlist = self.index.query(digest_sets)
        except DedupIndexError:
            return self._fail(conn.conn_id, m.Reason.MALFORMED)
        verdict = decide(shortlist, self._index_config)

        if isinstance(verdict, Duplicate):
            ref = bytes.fromhex(verdict.image_id)
            dup = self._open_exchange(conn, ref, verdict.collisions)
            if dup is not None:
                return dup
        elif "force_duplicate" in self.faults:
            for ref in self.images:
                dup = self._open_exchange(conn, ref, 0)
                if dup is not None:
                    return dup

        # Unique (or no holder online): hold the newest generation's
        # digests pending until the ciphertext commits.
        newest = self.index.newest.generation_id
        if newest not in digest_sets:
            return self._fail(conn.conn_id, m.Reason.MALFORMED)
        token = secrets.token_bytes(m.TOKEN_LEN)
        conn.pending[token] = _PendingUpload(
            user_id=conn.user_id,
            generation_id=newest,
            digests=tuple(d.digest for d in digest_sets[newest]),
        )
        return [Send(conn.conn_id, m.DedupResult(
            kind=m.DedupResult.KIND_UNIQUE, upload_token=token))]

    def _open_exchange(self, conn: _Conn, ref: bytes, collisions: int):
        """Returns the duplicate-path actions, or None to fall back."""
        img = self.images.get(ref)
        if img is None:
            return None
        try:
            holder_user = select_counterpart(
                img, set(self.serving), exclude=conn.user_id)
        except NoHolderOnline:
            return None
        holder_conn = self.serving[holder_user]
        exch_id = secrets.token_bytes(m.EXCHANGE_ID_LEN)
        exch = _Exchange(
            exchange_id=exch_id,
            image_ref=ref,
            uploader_conn=conn.conn_id,
            holder_conn=holder_conn,
            uploader_user=conn.user_id,
            holder_user=holder_user,
            deadline=self.clock() + self.config.exchange_deadline,
        )
        self.exchanges[exch_id] = exch
        conn.exchanges.add(exch_id)
        self.conns[holder_conn].exchanges.add(exch_id)
        return [
            Send(conn.conn_id, m.DedupResult(
                kind=m.DedupResult.KIND_DUPLICATE,
                exchange_id=exch_id,
                image_ref=ref,
                peer_role_hint=int(m.SenderRole.UPLOADER),
                collisions=collisions,
            )),
            Send(holder_conn, m.ExchangeOpen(
                exchange_id=exch_id, image_ref=ref)),
        ]

    def _on_upload_ct(self, conn: _Conn, msg: m.UploadCt) -> list[Action]:
        pending = conn.pending.pop(msg.upload_token, None)
        if pending is None:
            return self._fail(conn.conn_id, m.Reason.BAD_TOKEN)
        if pending.generation_id != self.index.newest.generation_id:
            # tables rolled between query and upload; client must requery
            return self._fail(conn.conn_id, m.Reason.BAD_TOKEN)
        user = self._user(conn.user_id)
        size = len(msg.ciphertext)
        ref = hashlib.sha256(msg.ciphertext).digest()

        if ref.hex() in self.index:
            # Byte-identical ciphertext already stored (e.g. retry after
            # a lost ACK): no new blob, no quota charge, just access.
            img = self.images[ref]
            if conn.user_id not in img.access_holders:
                self.log.append(oplog.Grant(
                    image_ref=ref, user_id=conn.user_id))
                img.add_holder(conn.user_id)
            return [Send(conn.conn_id, m.Ack(payload=ref))]

        if user.quota_used + size > user.quota_limit:
            return self._fail(conn.conn_id, m.Reason.QUOTA_EXCEEDED)

        self.crash_hook("blob_write")
        self.blobs.put(msg.ciphertext)

        self.crash_hook("oplog_append")
        self.log.append(oplog.Upload(
            image_ref=ref,
            generation_id=pending.generation_id,
            user_id=conn.user_id,
            size=size,
            digests=pending.digests,
        ))

        self.crash_hook("apply")
        self.index.insert(ref.hex(), [SlshDigest(d) for d in pending.digests])
        record = ImageRecord(image_ref=ref, size=size)
        record.add_holder(conn.user_id)
        self.images[ref] = record
        user.quota_used += size
        self._maybe_rollover()

        self.crash_hook("ack")
        return [Send(conn.conn_id, m.Ack(payload=ref))]

    def _maybe_rollover(self) -> None:
        if self.index.newest.entry_count >= self.config.capacity():
            seeds = tuple(os.urandom(32) for _ in range(self.config.tables))
            self.log.append(oplog.Rollover(
                generation_id=self.index.newest.generation_id + 1,
                seeds=seeds,
            ))
            self._stock_seeds(seeds)
            self.index.rollover()

    # ---------------------------------------------------------- exchanges

    _SLOT_FOR = {
        m.SlshParamShare: "params",
        m.PakeMsg: "pake",
        m.WrappedKey: "wrapped",
    }

    def _on_exchange_msg(self, conn: _Conn, msg) -> list[Action]:
        exch = self.exchanges.get(msg.exchange_id)
        if exch is None or conn.conn_id not in (exch.uploader_conn,
                                                exch.holder_conn):
            return self._fail(conn.conn_id, m.Reason.MALFORMED,
                              exchange_id=msg.exchange_id)
        if exch.terminal:
            return self._fail(conn.conn_id, m.Reason.MALFORMED,
                              exchange_id=msg.exchange_id)

        is_uploader = conn.conn_id == exch.uploader_conn
        side = "u" if is_uploader else "h"
        if isinstance(msg, m.SlshParamShare):
            want_role = (m.SenderRole.UPLOADER if is_uploader
                         else m.SenderRole.HOLDER)
            if msg.sender_role != want_role:
                return self._abort_exchange(exch, conn.conn_id, m.Reason.MALFORMED)
            slot = f"params_{side}"
        elif isinstance(msg, m.PakeMsg):
            slot = f"pake{msg.session_index}_{side}"
        else:  # WrappedKey: only the holder wraps
            if is_uploader:
                return self._abort_exchange(exch, conn.conn_id, m.Reason.MALFORMED)
            slot = "wrapped"
        if slot in exch.slots:
            return self._abort_exchange(exch, conn.conn_id, m.Reason.MALFORMED)
        exch.slots.add(slot)
        exch.deadline = self.clock() + self.config.exchange_deadline
        self._advance_phase(exch)

        actions: list[Action] = []
        peer = exch.peer_conn(conn.conn_id)
        if peer in self.conns:
            actions.append(Send(peer, msg))  # opaque relay, byte-preserving
        if isinstance(msg, m.WrappedKey):
            actions.extend(self._complete_exchange(exch))
        return actions

    def _advance_phase(self, exch: _Exchange) -> None:
        s = exch.slots
        if "wrapped" in s:
            exch.phase = "key_wrapped"
        elif {"pake2_u", "pake2_h", "pake1_u", "pake1_h"} <= s:
            exch.phase = "pake2"
        elif {"pake1_u", "pake1_h"} <= s:
            exch.phase = "pake1"
        elif {"params_u", "params_h"} <= s:
            exch.phase = "params_shared"

    def _complete_exchange(self, exch: _Exchange) -> list[Action]:
        """Key delivered: the uploader becomes an access holder and the
        serving holder's exchange count rises, both durably."""
        img = self.images[exch.image_ref]
        new_count = img.exchange_counts.get(exch.holder_user, 0) + 1
        self.log.append(oplog.Grant(
            image_ref=exch.image_ref,
            user_id=exch.uploader_user,
            served_by=exch.holder_user,
            count=new_count,
        ))
        img.add_holder(exch.uploader_user)
        img.exchange_counts[exch.holder_user] = new_count
        exch.phase = "done"
        return []

    def _abort_exchange(self, exch: _Exchange, offender: int,
                        reason: m.Reason) -> list[Action]:
        exch.phase = "aborted"
        actions: list[Action] = []
        if offender in self.conns:
            actions.append(Send(offender, m.Abort(
                reason=reason, exchange_id=exch.exchange_id)))
        peer = exch.peer_conn(offender)
        if peer in self.conns:
            actions.append(Send(peer, m.Abort(
                reason=m.Reason.PEER_ABORTED, exchange_id=exch.exchange_id)))
        return actions

    def _on_abort(self, conn: _Conn, msg: m.Abort) -> list[Action]:
        if msg.exchange_id == m.NO_EXCHANGE:
            return []  # connection-scoped notice; nothing to unwind
        exch = self.exchanges.get(msg.exchange_id)
        if exch is None or conn.conn_id not in (exch.uploader_conn,
                                                exch.holder_conn):
            return []
        if (exch.phase == "done"
                and msg.reason == m.Reason.AUTH_FAILURE
                and conn.conn_id == exch.uploader_conn):
            # Unwrap failed after key delivery: the uploader never got a
            # usable key, so revert its access durably.
            img = self.images[exch.image_ref]
            new_count = max(0, img.exchange_counts.get(exch.holder_user, 0) - 1)
            self.log.append(oplog.Revoke(
                image_ref=exch.image_ref,
                user_id=exch.uploader_user,
                served_by=exch.holder_user,
                count=new_count,
            ))
            img.remove_holder(exch.uploader_user)
            img.exchange_counts[exch.holder_user] = new_count
            exch.phase = "aborted"
            return []
        if exch.terminal:
            return []
        exch.phase = "aborted"
        peer = exch.peer_conn(conn.conn_id)
        if peer in self.conns:
            # relay the original reason so the peer can report it
            return [Send(peer, m.Abort(reason=msg.reason,
                                       exchange_id=exch.exchange_id))]
        return []

    def poll(self, now: float | None = None) -> list[Action]:
        """Fire exchange deadlines; returns abort notifications."""
        now = self.clock() if now is None else now
        actions: list[Action] = []
        for exch in list(self.exchanges.values()):
            if exch.terminal or exch.deadline > now:
                continue
            exch.phase = "aborted"
            for cid in (exch.uploader_conn, exch.holder_conn):
                if cid in self.conns:
                    actions.append(Send(cid, m.Abort(
                        reason=m.Reason.TIMEOUT,
                        exchange_id=exch.exchange_id)))
        return actions

    # ------------------------------------------------------------- fetch

    def _on_fetch_ct(self, conn: _Conn, msg: m.FetchCt) -> list[Action]:
        img = self.images.get(msg.image_ref)
        if img is None:
            return self._fail(conn.conn_id, m.Reason.BAD_TOKEN)
        allowed = conn.user_id in img.access_holders or any(
            exch.image_ref == msg.image_ref
            and exch.uploader_user == conn.user_id
            for exch in self.exchanges.values()
        )
        if not allowed:
            return self._fail(conn.conn_id, m.Reason.BAD_TOKEN)
        return [Send(conn.conn_id, m.Ct(ciphertext=self.blobs.get(msg.image_ref)))]
