"""Framed asyncio transport and the holder-side serve loop.

MsgStream satisfies the transport duck type the protocol flows expect
(async send/recv of message objects).  ServeLoop demultiplexes one
serving connection into per-exchange channels, so several key
exchanges can run concurrently over a single socket.
"""

from __future__ import annotations

import asyncio
import logging
from typing import Callable

from ..protocol import frames, messages as m
from ..protocol.flows import ClientState, KeyOffered, holder_serve

log = logging.getLogger("slshdedup.client")

_CONN_SCOPE = b"\x00" * 16


class ConnectionClosed(Exception):
    """The server hung up."""


class HandshakeRefused(Exception):
    def __init__(self, reason: m.Reason) -> None:
        super().__init__(f"server refused hello: {reason.name}")
        self.reason = reason


class MsgStream:
    def __init__(self, reader: asyncio.StreamReader,
                 writer: asyncio.StreamWriter) -> None:
        self.reader = reader
        self.writer = writer

    async def send(self, msg) -> None:
        self.writer.write(frames.encode_frame(*m.encode(msg)))
        await self.writer.drain()

    async def recv(self):
        try:
            msg_type, body = await frames.read_frame(self.reader)
        except (asyncio.IncompleteReadError, ConnectionError) as e:
            raise ConnectionClosed(str(e)) from e
        return m.decode(msg_type, body)

    async def close(self) -> None:
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except (ConnectionError, OSError):
            pass


async def connect(host: str, port: int, user_id: str,
                  serve: bool = False) -> MsgStream:
    """Open a connection and complete the hello handshake."""
    reader, writer = await asyncio.open_connection(host, port)
    stream = MsgStream(reader, writer)
    await stream.send(m.Hello(user_id=user_id, serve=serve))
    resp = await stream.recv()
    if isinstance(resp, m.Abort):
        await stream.close()
        raise HandshakeRefused(resp.reason)
    if not isinstance(resp, m.Ack):
        await stream.close()
        raise ConnectionClosed(f"unexpected hello response {type(resp).__name__}")
    return stream


class _ExchangeChannel:
    """Transport view scoped to one exchange: shared writes, own inbox."""

    def __init__(self, stream: MsgStream) -> None:
        self.stream = stream
        self.inbox: asyncio.Queue = asyncio.Queue()

    async def send(self, msg) -> None:
        await self.stream.send(msg)

    async def recv(self):
        return await self.inbox.get()


class ServeLoop:
    """Answer EXCHANGE_OPEN requests on a serving connection.

    One pump task owns the socket reader end to end (a frame is two
    reads; cancelling between them would corrupt the stream), routing
    each message to its exchange's inbox.  Exchanges run as tasks.
    """

    def __init__(self, stream: MsgStream, keystore, state: ClientState,
                 on_result: Callable[[object], None] | None = None,
                 max_exchanges: int | None = None) -> None:
        self.stream = stream
        self.keystore = keystore
        self.state = state
        self.on_result = on_result
        self.max_exchanges = max_exchanges
        self._channels: dict[bytes, _ExchangeChannel] = {}
        self._exchange_ids: dict[asyncio.Task, bytes] = {}
        self._completed = 0
        self._done = asyncio.Event()

    async def run(self) -> int:
        """Serve until the connection drops or max_exchanges finish."""
        self._done = asyncio.Event()
        pump = asyncio.ensure_future(self._pump())
        pump.add_done_callback(lambda _: self._done.set())
        try:
            await self._done.wait()
        finally:
            pump.cancel()
            await asyncio.gather(pump, return_exceptions=True)
            pending = list(self._exchange_ids)
            for task in pending:
                task.cancel()
            if pending:
                await asyncio.gather(*pending, return_exceptions=True)
        return self._completed

    async def _pump(self) -> None:
        while True:
            msg = await self.stream.recv()  # ConnectionClosed ends the loop
            self._dispatch(msg)

    def _dispatch(self, msg) -> None:
        if isinstance(msg, m.ExchangeOpen):
            channel = _ExchangeChannel(self.stream)
            self._channels[msg.exchange_id] = channel
            task = asyncio.ensure_future(
                holder_serve(msg, self.keystore, self.state, channel))
            self._exchange_ids[task] = msg.exchange_id
            task.add_done_callback(self._finish)
            return
        exch_id = getattr(msg, "exchange_id", None)
        if exch_id is not None and exch_id in self._channels:
            self._channels[exch_id].inbox.put_nowait(msg)
            return
        if isinstance(msg, m.Abort) and msg.exchange_id == _CONN_SCOPE:
            raise ConnectionClosed(f"server abort: {msg.reason.name}")
        log.debug("dropping unroutable %s", type(msg).__name__)

    def _finish(self, task: asyncio.Task) -> None:
        exch_id = self._exchange_ids.pop(task, None)
        if exch_id is not None:
            self._channels.pop(exch_id, None)
        if task.cancelled():
            return
        self._completed += 1
        err = task.exception()
        if err is not None:  # a failed exchange must not kill the loop
            log.warning("exchange failed: %s", err)
        else:
            result = task.result()
            if self.on_result is not None:
                self.on_result(result)
            if isinstance(result, KeyOffered):
                log.info("offered key for %s", result.image_ref.hex()[:12])
        if (self.max_exchanges is not None
                and self._completed >= self.max_exchanges):
            self._done.set()
