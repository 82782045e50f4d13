"""LID allocation and the two copies of the LID -> buffer address table.

Writers own the write-side table.  The read side is only ever changed by
commands flowing through a bounded channel, which stands in for the control
path between the host and the accelerator.  Each command is acknowledged
once the read side has applied it.
"""

from __future__ import annotations

import bisect
import itertools
import logging
import queue
import threading
import time
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from enum import IntEnum

from .errors import LidSpaceExhausted, UnknownLid
from .node_format import MAX_LID

log = logging.getLogger(__name__)


class CommandKind(IntEnum):
    SET_MAPPING = 1
    SET_READ_VERSION = 2
    SET_ROOT = 3
    SHUTDOWN = 4


@dataclass(slots=True)
class Command:
    kind: CommandKind
    lid: int = 0
    addr: int = 0
    version: int = 0
    height: int = 0
    done: threading.Event | None = None
    issued: float = field(default_factory=time.perf_counter)


@dataclass(frozen=True, slots=True)
class TraceRecord:
    kind: str
    lid: int
    latency: float


class CommandChannel:
    """Bounded FIFO of commands applied by a single consumer.

    In threaded mode a daemon thread drains the queue.  In inline mode the
    submitting thread applies the command itself under a lock, which keeps
    the same ordering and acknowledgement contract without a thread hop.
    """

    def __init__(self, apply: Callable[[Command], None], capacity: int = 4096,
                 threaded: bool = True, trace: bool = False):
        self._apply = apply
        self.capacity = capacity
        self.threaded = threaded
        self.trace = trace
        self.trace_log: list[TraceRecord] = []
        self.counts = {kind: 0 for kind in CommandKind}
        self._inline_lock = threading.Lock()
        self._queue: queue.Queue[Command] = queue.Queue(maxsize=capacity)
        self._thread: threading.Thread | None = None
        if threaded:
            self._thread = threading.Thread(target=self._consume, name="command-channel",
                                            daemon=True)
            self._thread.start()

    def submit(self, cmd: Command, wait: bool = True) -> Command:
        self.enqueue(cmd, ack=wait)
        if wait:
            self.wait(cmd)
        return cmd

    def enqueue(self, cmd: Command, ack: bool = True) -> Command:
        """Queue ``cmd`` without waiting; in inline mode it is applied at once."""
        if self.threaded:
            if ack and cmd.done is None:
                cmd.done = threading.Event()
            self._queue.put(cmd)
        else:
            with self._inline_lock:
                self._run(cmd)
        return cmd

    def wait(self, cmd: Command) -> None:
        if self.threaded and cmd.done is not None:
            cmd.done.wait()

    def _run(self, cmd: Command) -> None:
        self._apply(cmd)
        self.counts[cmd.kind] += 1
        if self.trace:
            self.trace_log.append(TraceRecord(cmd.kind.name, cmd.lid,
                                              time.perf_counter() - cmd.issued))
        if cmd.done is not None:
            cmd.done.set()

    def _consume(self) -> None:
        while True:
            cmd = self._queue.get()
            if cmd.kind == CommandKind.SHUTDOWN:
                if cmd.done is not None:
                    cmd.done.set()
                return
            if cmd.version < 0:  # drain marker
                cmd.done.set()
                continue
            self._run(cmd)

    def drain(self) -> None:
        """Block until every command submitted so far has been applied."""
        if self.threaded and self._thread is not None:
            marker = Command(CommandKind.SET_READ_VERSION, version=-1,
                             done=threading.Event())
            self._queue.put(marker)
            marker.done.wait()

    def close(self) -> None:
        if self.threaded and self._thread is not None:
            self._queue.put(Command(CommandKind.SHUTDOWN))
            self._thread.join()
            self._thread = None


class ReadSide:
    """The read engine's copy of the table plus its root history."""

    def __init__(self):
        self.table: dict[int, int] = {}
        # (version, lid, height), ascending by version.  Requests pick the
        # root that was current at their read version.
        self.roots: list[tuple[int, int, int]] = []
        self.listeners: list[Callable[[int], None]] = []
        self.lock = threading.Lock()

    def resolve(self, lid: int) -> int:
        addr = self.table.get(lid, 0) if lid else 0
        if not addr:
            raise UnknownLid(lid)
        return addr

    def root_for(self, version: int) -> tuple[int, int]:
        with self.lock:
            if not self.roots:
                raise UnknownLid("no root installed")
            i = bisect.bisect_right(self.roots, (version, MAX_LID + 1, 0)) - 1
            _, lid, height = self.roots[max(i, 0)]
            return lid, height


class PageTable:
    """Write-side table, read-side copy and the command channel joining them."""

    ROOT_HISTORY = 4096

    def __init__(self, on_read_version: Callable[[int], None] | None = None,
                 threaded: bool = True, capacity: int = 4096, trace: bool = False,
                 lid_counter: Iterable[int] | None = None):
        self.write: dict[int, int] = {}
        self.read = ReadSide()
        self.root: tuple[int, int] = (0, 0)
        self._on_read_version = on_read_version
        self._lids = iter(lid_counter) if lid_counter is not None else itertools.count(1)
        self._lid_lock = threading.Lock()
        self.channel = CommandChannel(self._apply, capacity, threaded, trace)
        # write-side updates and their queue order must agree
        self._order = threading.Lock()
        self.remaps = 0

    # read side, run by the channel consumer
    def _apply(self, cmd: Command) -> None:
        read = self.read
        if cmd.kind == CommandKind.SET_MAPPING:
            if cmd.addr:
                read.table[cmd.lid] = cmd.addr
            else:
                read.table.pop(cmd.lid, None)
            for listener in read.listeners:
                try:
                    listener(cmd.lid)
                except Exception:  # a bad listener must not stop the channel
                    log.exception("mapping listener failed for LID %d", cmd.lid)
        elif cmd.kind == CommandKind.SET_READ_VERSION:
            if cmd.version >= 0 and self._on_read_version is not None:
                self._on_read_version(cmd.version)
        elif cmd.kind == CommandKind.SET_ROOT:
            with read.lock:
                roots = read.roots
                while roots and roots[-1][0] >= cmd.version:
                    roots.pop()
                roots.append((cmd.version, cmd.lid, cmd.height))
                if len(roots) > self.ROOT_HISTORY:
                    del roots[:len(roots) - self.ROOT_HISTORY]

    def allocate_lid(self) -> int:
        with self._lid_lock:
            lid = next(self._lids)
        if lid > MAX_LID:
            raise LidSpaceExhausted(f"all {MAX_LID} LIDs are in use")
        return lid

    def map_new(self, pairs: Iterable[tuple[int, int]]) -> None:
        """Install mappings for freshly allocated LIDs on both sides."""
        last = None
        with self._order:
            for lid, addr in pairs:
                self.write[lid] = addr
                last = self.channel.enqueue(Command(CommandKind.SET_MAPPING, lid, addr),
                                            ack=False)
        if last is not None:
            self.channel.drain()

    def update_mapping(self, lid: int, addr: int) -> None:
        with self._order:
            if not lid or lid not in self.write:
                raise UnknownLid(lid)
            self.write[lid] = addr
            self.remaps += 1
            cmd = self.channel.enqueue(Command(CommandKind.SET_MAPPING, lid, addr))
        self.channel.wait(cmd)

    def unmap(self, lids: Iterable[int]) -> None:
        any_ = False
        with self._order:
            for lid in lids:
                self.write.pop(lid, None)
                self.channel.enqueue(Command(CommandKind.SET_MAPPING, lid, 0), ack=False)
                any_ = True
        if any_:
            self.channel.drain()

    def resolve(self, lid: int, side: str = "write") -> int:
        if side == "read":
            return self.read.resolve(lid)
        addr = self.write.get(lid, 0) if lid else 0
        if not addr:
            raise UnknownLid(lid)
        return addr

    def set_root(self, lid: int, height: int, version: int = 0) -> None:
        with self._order:
            self.root = (lid, height)
            cmd = self.channel.enqueue(Command(CommandKind.SET_ROOT, lid, version=version,
                                               height=height))
        self.channel.wait(cmd)

    def publish_read_version(self, version: int) -> None:
        self.channel.submit(Command(CommandKind.SET_READ_VERSION, version=version), wait=False)

    def in_sync(self) -> bool:
        self.channel.drain()
        return self.write == self.read.table

    def close(self) -> None:
        self.channel.close()
