"""Asyncio TCP shell around the server engine.

One reader task and one writer task per connection; every decoded
frame goes through engine.handle_frame(), whose returned actions are
fanned out to the target connections' outboxes.  The engine itself is
synchronous, so running it inline on the event loop gives linearizable
state transitions across all connections.
"""

from __future__ import annotations

import asyncio
import logging

from ..protocol import frames, messages as m
from .engine import Close, Send, ServerEngine

log = logging.getLogger("slshdedup.server")

POLL_INTERVAL = 0.25


class DedupServer:
    def __init__(self, engine: ServerEngine, host: str = "127.0.0.1",
                 port: int = 0) -> None:
        self.engine = engine
        self.host = host
        self.port = port
        self._server: asyncio.AbstractServer | None = None
        self._outboxes: dict[int, asyncio.Queue] = {}
        self._tasks: set[asyncio.Task] = set()
        self._next_conn = 0
        self._poll_task: asyncio.Task | None = None

    async def start(self) -> None:
        self._server = await asyncio.start_server(
            self._on_connection, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        self._poll_task = asyncio.create_task(self._poll_loop())
        log.info("listening on %s:%d", self.host, self.port)

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        if self._poll_task is not None:
            self._poll_task.cancel()
        for task in list(self._tasks):
            task.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        self.engine.persist()
        self.engine.close()

    async def serve_forever(self) -> None:
        assert self._server is not None
        await self._server.serve_forever()

    # ------------------------------------------------------------ wiring

    def _execute(self, actions) -> None:
        for action in actions:
            if isinstance(action, Send):
                outbox = self._outboxes.get(action.conn_id)
                if outbox is not None:
                    outbox.put_nowait(action.msg)
            elif isinstance(action, Close):
                outbox = self._outboxes.get(action.conn_id)
                if outbox is not None:
                    outbox.put_nowait(None)

    async def _poll_loop(self) -> None:
        while True:
            await asyncio.sleep(POLL_INTERVAL)
            self._execute(self.engine.poll())

    async def _on_connection(self, reader: asyncio.StreamReader,
                             writer: asyncio.StreamWriter) -> None:
        conn_id = self._next_conn
        self._next_conn += 1
        outbox: asyncio.Queue = asyncio.Queue()
        self._outboxes[conn_id] = outbox
        self.engine.connect(conn_id)

        w_task = asyncio.create_task(self._writer_loop(writer, outbox))
        self._tasks.add(w_task)
        w_task.add_done_callback(self._tasks.discard)
        try:
            while True:
                try:
                    msg_type, body = await frames.read_frame(reader)
                except (asyncio.IncompleteReadError, ConnectionError):
                    break
                except frames.ProtocolError:
                    self._execute([
                        Send(conn_id, m.Abort(reason=m.Reason.MALFORMED)),
                        Close(conn_id),
                    ])
                    break
                self._execute(self.engine.handle_frame(conn_id, msg_type, body))
        finally:
            self._execute(self.engine.disconnect(conn_id))
            outbox.put_nowait(None)
            self._outboxes.pop(conn_id, None)
            await w_task

    async def _writer_loop(self, writer: asyncio.StreamWriter,
                           outbox: asyncio.Queue) -> None:
        try:
            while True:
                msg = await outbox.get()
                if msg is None:
                    break
                msg_type, body = m.encode(msg)
                writer.write(frames.encode_frame(msg_type, body))
                await writer.drain()
        except (ConnectionError, asyncio.CancelledError):
            pass
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass
