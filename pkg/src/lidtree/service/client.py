"""Blocking client with request pipelining."""

from __future__ import annotations

import itertools
import socket
import time
from collections import deque
from collections.abc import Callable, Iterable, Iterator

from ..errors import ProtocolError
from .protocol import (
    MAX_RESPONSE_FRAME,
    PREFIX_SIZE,
    RESPONSE_MAGIC,
    Opcode,
    Request,
    Response,
    Status,
    decode_response_body,
    encode_request,
    frame_length,
)

FollowUp = Callable[[Request, Response], "Request | None"]


class Client:
    def __init__(self, host: str = "127.0.0.1", port: int = 7400, timeout: float = 10.0,
                 window: int = 64, retries: int = 100, backoff: float = 0.0005):
        self.window = window
        self.retries = retries
        self.backoff = backoff
        self._ids = itertools.count(1)
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._rfile = self.sock.makefile("rb")
        self.overloaded = 0

    def close(self) -> None:
        try:
            self._rfile.close()
        finally:
            self.sock.close()

    def __enter__(self) -> Client:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # request construction

    def request(self, opcode: Opcode, key: bytes, key2: bytes = b"",
                value: bytes = b"") -> Request:
        return Request(next(self._ids), Opcode(opcode), key, key2, value)

    # framing

    def send(self, req: Request) -> None:
        self.sock.sendall(encode_request(req))

    def _read(self, n: int) -> bytes:
        data = self._rfile.read(n)
        if len(data) != n:
            raise ConnectionResetError("server closed the connection")
        return data

    def receive(self) -> Response:
        length = frame_length(self._read(PREFIX_SIZE), RESPONSE_MAGIC, MAX_RESPONSE_FRAME)
        return decode_response_body(self._read(length))

    # execution

    def execute(self, req: Request) -> Response:
        return self.pipeline([req], window=1)[0]

    def pipeline(self, requests: Iterable[Request], window: int | None = None,
                 follow_up: FollowUp | None = None,
                 latencies: list[float] | None = None) -> list[Response]:
        """Keep up to ``window`` requests outstanding; returns responses in
        completion order.  ``follow_up`` may return a new request to issue once
        a response arrives.  OVERLOADED responses are retried with backoff.
        Per-request latencies (first send to final response) are appended to
        ``latencies`` when given."""
        sent: dict[int, float] = {}
        window = window or self.window
        source: Iterator[Request] = iter(requests)
        queued: deque[Request] = deque()
        pending: dict[int, Request] = {}
        attempts: dict[int, int] = {}
        out: list[Response] = []
        exhausted = False
        while True:
            while len(pending) < window:
                if queued:
                    req = queued.popleft()
                elif not exhausted:
                    req = next(source, None)
                    if req is None:
                        exhausted = True
                        continue
                else:
                    break
                if req.request_id in pending:
                    raise ProtocolError(f"duplicate request id {req.request_id}")
                pending[req.request_id] = req
                sent.setdefault(req.request_id, time.perf_counter())
                self.send(req)
            if not pending:
                return out
            resp = self.receive()
            req = pending.pop(resp.request_id, None)
            if req is None:
                raise ProtocolError(f"response for unknown request {resp.request_id}"
                                    + (f": {resp.message}" if resp.message else ""))
            if resp.status == Status.OVERLOADED:
                self.overloaded += 1
                n = attempts.get(req.request_id, 0) + 1
                if n <= self.retries:
                    attempts[req.request_id] = n
                    time.sleep(self.backoff * min(n, 20))
                    queued.appendleft(req)
                    continue
            attempts.pop(req.request_id, None)
            started = sent.pop(req.request_id, None)
            if latencies is not None and started is not None:
                latencies.append(time.perf_counter() - started)
            out.append(resp)
            if follow_up is not None:
                nxt = follow_up(req, resp)
                if nxt is not None:
                    queued.append(nxt)

    # conveniences

    def get(self, key: bytes) -> bytes | None:
        return self.execute(self.request(Opcode.GET, key)).value

    def get_via_scan(self, key: bytes) -> bytes | None:
        """Point lookup as a one-key scan with client-side filtering."""
        resp = self.execute(self.request(Opcode.SCAN, key, key))
        return next((v for k, v in resp.items if k == key), None)

    def scan(self, lower: bytes, upper: bytes) -> list[tuple[bytes, bytes]]:
        resp = self.execute(self.request(Opcode.SCAN, lower, upper))
        if resp.status == Status.ERR:
            raise ValueError(resp.message)
        return resp.items

    def put(self, key: bytes, value: bytes) -> Status:
        return self.execute(self.request(Opcode.PUT, key, value=value)).status

    def update(self, key: bytes, value: bytes) -> Status:
        return self.execute(self.request(Opcode.UPDATE, key, value=value)).status

    def delete(self, key: bytes) -> Status:
        return self.execute(self.request(Opcode.DELETE, key)).status
