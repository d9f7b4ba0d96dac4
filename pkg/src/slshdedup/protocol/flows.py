"""Client-side role state machines: uploader and key holder.

Both roles run over an abstract message transport (async send/recv)
so the same machines drive real sockets and in-memory test harnesses.
Every path out of a machine is a returned result or an Aborted value;
nothing hangs past its deadline and no exception escapes for protocol-
level failures (transport failures do raise).

Key-exchange shape: uploader plays PAKE role A in both sessions, the
holder role B.  Session 1's password is each party's own-vector digest
under the uploader's fresh parameters, session 2's under the holder's.
Equal digests in both sessions yield equal keks, and only then does
the wrapped image key unwrap.
"""

from __future__ import annotations

import asyncio
import hashlib
import secrets
from dataclasses import dataclass, field

from .. import crypto, pake
from ..crypto import AuthFailure, Ciphertext, ImageKey
from ..features import FeatureVector
from ..slsh import SlshError, gen_params, slsh
from . import messages as m

DEFAULT_TIMEOUT = 30.0


@dataclass(frozen=True)
class ClientState:
    """Per-client protocol settings shared by both roles."""

    user_id: str
    pake_bits: int = 2048
    exchange_h: int = 24
    timeout: float = DEFAULT_TIMEOUT


@dataclass(frozen=True)
class Stored:
    image_ref: bytes
    image_key: ImageKey


@dataclass(frozen=True)
class Deduplicated:
    image_ref: bytes
    image_key: ImageKey
    plaintext: bytes = field(repr=False)
    collisions: int = 0


@dataclass(frozen=True)
class Aborted:
    reason: str


@dataclass(frozen=True)
class KeyOffered:
    image_ref: bytes


def _reason_name(reason: m.Reason) -> str:
    return reason.name.lower()


class _Abort(Exception):
    """Internal control flow; converted to an Aborted result."""

    def __init__(self, reason: str, notify: m.Reason | None = None,
                 exchange_id: bytes = b"") -> None:
        super().__init__(reason)
        self.reason = reason
        self.notify = notify
        self.exchange_id = exchange_id


async def _recv(transport, timeout: float, exchange_id: bytes = b""):
    """One message within the deadline; peer/server aborts surface here."""
    try:
        msg = await asyncio.wait_for(transport.recv(), timeout)
    except (asyncio.TimeoutError, TimeoutError):
        raise _Abort("timeout", m.Reason.TIMEOUT, exchange_id) from None
    if isinstance(msg, m.Abort):
        raise _Abort(_reason_name(msg.reason))
    return msg


async def _notify_abort(transport, exc: _Abort) -> None:
    if exc.notify is None:
        return
    try:
        await transport.send(m.Abort(reason=exc.notify,
                                     exchange_id=exc.exchange_id or m.NO_EXCHANGE))
    except (ConnectionError, OSError):
        pass  # peer already gone; the local result still reports the abort


def exchange_contexts(exchange_id: bytes, image_ref: bytes) -> tuple[bytes, bytes, bytes]:
    """(session-1 context, session-2 context, kek context)."""
    base = exchange_id + image_ref
    return base + b"\x01", base + b"\x02", base


async def _run_pake_sessions(
    transport,
    state: ClientState,
    exchange_id: bytes,
    image_ref: bytes,
    role: pake.Role,
    vector: FeatureVector,
    own_seed: bytes,
    peer_share: m.SlshParamShare,
) -> bytes:
    """Both PAKE sessions for one party; returns the derived kek.

    own_seed is this party's fresh parameter seed (already shared);
    peer_share is the counterpart's.  Session 1 always keys off the
    uploader's parameters, session 2 off the holder's, on both sides.
    """
    if peer_share.dim != vector.dim:
        raise _Abort("malformed", m.Reason.MALFORMED, exchange_id)
    try:
        own_params = gen_params(own_seed, vector.dim, state.exchange_h)
        peer_params = gen_params(peer_share.seed, peer_share.dim, peer_share.h)
    except (SlshError, ValueError):
        raise _Abort("malformed", m.Reason.MALFORMED, exchange_id) from None

    if role is pake.Role.A:  # uploader shared p_i, peer is the holder with p_j
        p_first, p_second = own_params, peer_params
    else:
        p_first, p_second = peer_params, own_params
    pw1 = slsh(p_first, vector).digest
    pw2 = slsh(p_second, vector).digest

    ctx1, ctx2, kek_ctx = exchange_contexts(exchange_id, image_ref)
    group = pake.group_params(state.pake_bits)
    s1, msg1 = pake.start(role, group, pw1, ctx1)
    s2, msg2 = pake.start(role, group, pw2, ctx2)
    await transport.send(m.PakeMsg(exchange_id=exchange_id, session_index=1,
                                   element=msg1))
    await transport.send(m.PakeMsg(exchange_id=exchange_id, session_index=2,
                                   element=msg2))

    peer_elems: dict[int, bytes] = {}
    while len(peer_elems) < 2:
        msg = await _recv(transport, state.timeout, exchange_id)
        if (not isinstance(msg, m.PakeMsg) or msg.exchange_id != exchange_id
                or msg.session_index in peer_elems):
            raise _Abort("malformed", m.Reason.MALFORMED, exchange_id)
        peer_elems[msg.session_index] = msg.element

    try:
        k1 = pake.finish(s1, peer_elems[1])
        k2 = pake.finish(s2, peer_elems[2])
    except pake.InvalidElement:
        raise _Abort("malformed", m.Reason.MALFORMED, exchange_id) from None
    return crypto.derive_kek(k1.key, k2.key, kek_ctx)


def digest_sets_for(vector: FeatureVector, params_msg: m.Params) -> tuple:
    """Per-generation digest tuples for UPLOAD_HASHES."""
    from ..slsh import decode_params

    sets = []
    for gen_id, encoded in params_msg.generations:
        params = [decode_params(raw) for raw in encoded]
        sets.append((gen_id, tuple(slsh(p, vector) for p in params)))
    return tuple(sets)


async def uploader_run(
    plaintext: bytes,
    vector: FeatureVector,
    state: ClientState,
    transport,
) -> Stored | Deduplicated | Aborted:
    """Full upload flow: dedup query, then store or key exchange."""
    try:
        return await _uploader_run(plaintext, vector, state, transport)
    except _Abort as exc:
        await _notify_abort(transport, exc)
        return Aborted(reason=exc.reason)


async def _uploader_run(
    plaintext: bytes, vector: FeatureVector, state: ClientState, transport
) -> Stored | Deduplicated:
    await transport.send(m.GetParams())
    params_msg = await _recv(transport, state.timeout)
    if not isinstance(params_msg, m.Params):
        raise _Abort("malformed", m.Reason.MALFORMED)

    upload_ref = secrets.token_bytes(m.UPLOAD_REF_LEN)
    await transport.send(m.UploadHashes(
        user_id=state.user_id,
        upload_ref=upload_ref,
        digest_sets=digest_sets_for(vector, params_msg),
    ))
    verdict = await _recv(transport, state.timeout)
    if not isinstance(verdict, m.DedupResult):
        raise _Abort("malformed", m.Reason.MALFORMED)

    if verdict.kind == m.DedupResult.KIND_UNIQUE:
        return await _store_fresh(plaintext, state, transport, verdict.upload_token)
    return await _dedup_exchange(plaintext, vector, state, transport, verdict)


async def _store_fresh(
    plaintext: bytes, state: ClientState, transport, token: bytes
) -> Stored:
    key = crypto.gen_key()
    ct = crypto.encrypt_image(key, plaintext).to_bytes()
    image_ref = hashlib.sha256(ct).digest()
    await transport.send(m.UploadCt(upload_token=token, ciphertext=ct))
    ack = await _recv(transport, state.timeout)
    if not isinstance(ack, m.Ack) or ack.payload != image_ref:
        raise _Abort("malformed", m.Reason.MALFORMED)
    return Stored(image_ref=image_ref, image_key=key)


async def _dedup_exchange(
    plaintext: bytes,
    vector: FeatureVector,
    state: ClientState,
    transport,
    verdict: m.DedupResult,
) -> Deduplicated:
    exch, image_ref = verdict.exchange_id, verdict.image_ref
    seed = secrets.token_bytes(32)
    await transport.send(m.SlshParamShare(
        exchange_id=exch, sender_role=int(m.SenderRole.UPLOADER),
        seed=seed, dim=vector.dim, h=state.exchange_h,
    ))
    share = await _recv(transport, state.timeout, exch)
    if (not isinstance(share, m.SlshParamShare) or share.exchange_id != exch
            or share.sender_role != m.SenderRole.HOLDER):
        raise _Abort("malformed", m.Reason.MALFORMED, exch)

    kek = await _run_pake_sessions(
        transport, state, exch, image_ref, pake.Role.A, vector, seed, share,
    )

    wrapped_msg = await _recv(transport, state.timeout, exch)
    if (not isinstance(wrapped_msg, m.WrappedKey)
            or wrapped_msg.exchange_id != exch):
        raise _Abort("malformed", m.Reason.MALFORMED, exch)
    try:
        image_key = crypto.unwrap_key(kek, wrapped_msg.wrapped)
    except AuthFailure:
        # Dissimilar vectors (or a lying server): keks differ, no key moves.
        raise _Abort("auth_failure", m.Reason.AUTH_FAILURE, exch) from None

    await transport.send(m.FetchCt(image_ref=image_ref))
    ct_msg = await _recv(transport, state.timeout, exch)
    if not isinstance(ct_msg, m.Ct):
        raise _Abort("malformed", m.Reason.MALFORMED, exch)
    if hashlib.sha256(ct_msg.ciphertext).digest() != image_ref:
        raise _Abort("malformed", m.Reason.MALFORMED, exch)
    try:
        recovered = crypto.decrypt_image(
            image_key, Ciphertext.from_bytes(ct_msg.ciphertext))
    except (AuthFailure, crypto.CryptoError):
        raise _Abort("auth_failure", m.Reason.AUTH_FAILURE, exch) from None
    return Deduplicated(
        image_ref=image_ref,
        image_key=image_key,
        plaintext=recovered,
        collisions=verdict.collisions,
    )


async def holder_serve(
    request: m.ExchangeOpen,
    keystore,
    state: ClientState,
    transport,
) -> KeyOffered | Aborted:
    """Answer one key-exchange request for an image this client holds."""
    try:
        return await _holder_serve(request, keystore, state, transport)
    except _Abort as exc:
        await _notify_abort(transport, exc)
        return Aborted(reason=exc.reason)


async def _holder_serve(
    request: m.ExchangeOpen, keystore, state: ClientState, transport
) -> KeyOffered:
    exch, image_ref = request.exchange_id, request.image_ref
    record = keystore.lookup(image_ref)
    if record is None:
        raise _Abort("bad_token", m.Reason.BAD_TOKEN, exch)
    vector, image_key = record.vector, record.key

    seed = secrets.token_bytes(32)
    await transport.send(m.SlshParamShare(
        exchange_id=exch, sender_role=int(m.SenderRole.HOLDER),
        seed=seed, dim=vector.dim, h=state.exchange_h,
    ))
    share = await _recv(transport, state.timeout, exch)
    if (not isinstance(share, m.SlshParamShare) or share.exchange_id != exch
            or share.sender_role != m.SenderRole.UPLOADER):
        raise _Abort("malformed", m.Reason.MALFORMED, exch)

    kek = await _run_pake_sessions(
        transport, state, exch, image_ref, pake.Role.B, vector, seed, share,
    )
    wrapped = crypto.wrap_key(kek, image_key)
    await transport.send(m.WrappedKey(exchange_id=exch, wrapped=wrapped))
    return KeyOffered(image_ref=image_ref)
