"""Asyncio front end: frames in, engine calls on a thread pool, frames out.

Requests on one connection run concurrently and may complete out of order;
responses carry the request id.  Write responses go out only after the
engine returns, which is after the write's version has been released.
"""

from __future__ import annotations

import asyncio
import logging
import threading
from concurrent.futures import ThreadPoolExecutor

from ..errors import Overloaded, ProtocolError, StoreError
from ..write_engine import WriteResult
from .protocol import (
    MAX_REQUEST_FRAME,
    PREFIX_SIZE,
    REQUEST_MAGIC,
    Opcode,
    Request,
    Response,
    Status,
    decode_request_body,
    encode_response,
    error_response,
    frame_length,
)

log = logging.getLogger(__name__)


def handle(store, req: Request) -> Response:
    """Run one request against the store."""
    rid = req.request_id
    try:
        if req.opcode == Opcode.GET:
            value = store.get(req.key)
            if value is None:
                return Response(rid, Status.NOTFOUND)
            return Response(rid, Status.OK, [(req.key, value)])
        if req.opcode == Opcode.SCAN:
            if req.key > req.key2:
                return error_response(rid, "scan lower bound exceeds upper bound")
            return Response(rid, Status.OK, store.scan(req.key, req.key2))
        if req.opcode == Opcode.PUT:
            store.put(req.key, req.value)
            return Response(rid, Status.OK)
        if req.opcode == Opcode.UPDATE:
            result = store.update(req.key, req.value)
        else:
            result = store.delete(req.key)
        status = Status.NOTFOUND if result == WriteResult.NOT_FOUND else Status.OK
        return Response(rid, status)
    except Overloaded:
        return Response(rid, Status.OVERLOADED)
    except (StoreError, ValueError) as exc:
        return error_response(rid, f"{type(exc).__name__}: {exc}")


class Server:
    def __init__(self, store, host: str = "127.0.0.1", port: int = 0, workers: int = 8,
                 max_inflight: int = 256):
        self.store = store
        self.host = host
        self.port = port
        self.max_inflight = max_inflight
        self.pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="kv-worker")
        self._server: asyncio.base_events.Server | None = None
        self.connections = 0
        self.requests = 0

    async def start(self) -> tuple[str, int]:
        self._server = await asyncio.start_server(self._connection, self.host, self.port)
        sock = self._server.sockets[0]
        self.host, self.port = sock.getsockname()[:2]
        return self.host, self.port

    async def serve_forever(self) -> None:
        if self._server is None:
            await self.start()
        async with self._server:
            await self._server.serve_forever()

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        self.pool.shutdown(wait=True)

    async def _connection(self, reader: asyncio.StreamReader,
                          writer: asyncio.StreamWriter) -> None:
        loop = asyncio.get_running_loop()
        self.connections += 1
        slots = asyncio.Semaphore(self.max_inflight)
        pending: set[asyncio.Future] = set()

        def reply(fut: asyncio.Future) -> None:
            pending.discard(fut)
            slots.release()
            if writer.is_closing():
                return
            try:
                resp = fut.result()
            except Exception as exc:  # pragma: no cover - handle() maps store errors
                log.exception("request failed")
                resp = error_response(0, str(exc))
            writer.write(encode_response(resp))

        try:
            while True:
                try:
                    prefix = await reader.readexactly(PREFIX_SIZE)
                except (asyncio.IncompleteReadError, ConnectionError):
                    break
                try:
                    length = frame_length(prefix, REQUEST_MAGIC, MAX_REQUEST_FRAME)
                    body = await reader.readexactly(length)
                    req = decode_request_body(body)
                except (ProtocolError, asyncio.IncompleteReadError) as exc:
                    writer.write(encode_response(error_response(0, f"malformed frame: {exc}")))
                    break
                self.requests += 1
                await slots.acquire()
                fut = loop.run_in_executor(self.pool, handle, self.store, req)
                pending.add(fut)
                fut.add_done_callback(reply)
            if pending:
                await asyncio.gather(*pending, return_exceptions=True)
            await writer.drain()
        except ConnectionError:
            pass
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except ConnectionError:
                pass


class ServerThread:
    """Run a ``Server`` on its own event loop in a background thread."""

    def __init__(self, store, host: str = "127.0.0.1", port: int = 0, workers: int = 8):
        self.server = Server(store, host, port, workers)
        self._loop = asyncio.new_event_loop()
        self._ready = threading.Event()
        self._thread = threading.Thread(target=self._run, name="kv-server", daemon=True)
        self._error: BaseException | None = None

    def _run(self) -> None:
        asyncio.set_event_loop(self._loop)
        try:
            self._loop.run_until_complete(self.server.start())
        except BaseException as exc:
            self._error = exc
            self._ready.set()
            return
        self._ready.set()
        self._loop.run_forever()
        self._loop.run_until_complete(self.server.close())
        self._loop.close()

    def start(self) -> tuple[str, int]:
        self._thread.start()
        self._ready.wait()
        if self._error is not None:
            raise self._error
        return self.address

    @property
    def address(self) -> tuple[str, int]:
        return self.server.host, self.server.port

    def stop(self) -> None:
        if self._thread.is_alive():
            self._loop.call_soon_threadsafe(self._loop.stop)
            self._thread.join()

    def __enter__(self) -> ServerThread:
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(store, listen: str = "127.0.0.1:7400", workers: int = 8) -> None:
    """Serve until interrupted."""
    host, _, port = listen.rpartition(":")
    server = Server(store, host or "127.0.0.1", int(port), workers)

    async def main() -> None:
        addr = await server.start()
        log.info("listening on %s:%d", *addr)
        try:
            await server.serve_forever()
        finally:
            await server.close()

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
