"""Wait-free get/scan.

A request is a generator: it yields ``Fetch`` descriptors and receives the
``(address, bytes)`` the memory backend produced.  The direct backend below
serves fetches straight from the arena; the simulator drives the same
generators on a virtual clock.  Readers never look at lock bits.
"""

from __future__ import annotations

import bisect
import threading
from collections.abc import Generator
from dataclasses import dataclass, field

from .errors import CorruptNode, Overloaded, ResultTooLarge
from .memory import Arena
from .mvcc import GlobalVersions
from .node_format import (
    SORTED_START,
    USE_LEFTMOST,
    EntryKind,
    Header,
    LogEntry,
    NodeType,
    Segment,
    SortedItem,
    check_key,
    parse_segment,
    read_header,
    read_log,
    read_shortcuts,
    segments,
    sort_log,
)
from .page_table import PageTable


@dataclass(frozen=True, slots=True)
class Fetch:
    lid: int
    offset: int
    length: int
    interior: bool
    addr: int = 0  # explicit buffer (old-version chain); 0 = resolve the LID
    block: str = "header"  # header | sorted | log


@dataclass(frozen=True, slots=True)
class TraceEntry:
    seq: int
    lid: int
    addr: int
    block: str
    offset: int
    length: int
    channel: str
    interior: bool


@dataclass(eq=False)
class RequestMeta:
    seq: int
    read_version: int
    op: str  # get | scan
    lower: bytes
    upper: bytes
    root_lid: int
    height: int
    lid: int = 0
    level: int = 0
    block: str = "header"
    offset: int = 0
    nat: dict[int, int] = field(default_factory=dict)
    fetches: int = 0
    bytes_fetched: int = 0
    trace: list[TraceEntry] | None = None
    result: list[tuple[bytes, bytes]] = field(default_factory=list)


Pipeline = Generator[Fetch, tuple[int, bytes], object]


def _anchor(entry: LogEntry, by_offset: dict[int, LogEntry], memo: dict[int, tuple[int, int]]):
    """Sorted-block position of a log entry: (offset, class).

    Inserts sit just before the item they point at (class 0); updates and
    deletes sit just after the item they supersede (class 2).  A reference
    to another log entry inherits that entry's position.
    """
    got = memo.get(entry.offset)
    if got is not None:
        return got
    chain = []
    e = entry
    while True:
        if e.offset in memo:
            pos = memo[e.offset]
            break
        chain.append(e)
        if e.kind == EntryKind.INSERT:
            pos = (e.back_ref, 0)
            break
        target = by_offset.get(e.back_ref)
        if target is None:
            pos = (e.back_ref, 2)
            break
        if target.offset >= e.offset:
            raise CorruptNode("log back reference points forward")
        e = target
    for c in chain:
        memo[c.offset] = pos
    return pos


def merge_leaf(items: list[SortedItem], entries: list[LogEntry], node_version: int,
               read_version: int | None) -> list[tuple[bytes, bytes]]:
    """Live (key, value) pairs of a leaf view at ``read_version``, ascending.

    Sorted items and log entries are interleaved by back references and
    order hints only; keys are compared for equality to group versions of
    the same key, never to order the two blocks against each other.
    """
    if not entries:
        return [(it.key, it.payload) for it in items]
    ranks = {off: r for r, off in enumerate(sort_log(entries))}
    by_offset = {e.offset: e for e in entries}
    memo: dict[int, tuple[int, int]] = {}
    records = [(it.offset, 1, 0, -1, it.key, it.payload) for it in items]
    for e in entries:
        if read_version is not None and node_version + e.version_delta > read_version:
            continue
        off, cls = _anchor(e, by_offset, memo)
        records.append((off, cls, ranks[e.offset], e.offset,
                        e.key, None if e.kind == EntryKind.DELETE else e.value))
    records.sort(key=lambda r: (r[0], r[1], r[2]))
    out = []
    i, n = 0, len(records)
    while i < n:
        key = records[i][4]
        newest = records[i]
        j = i + 1
        while j < n and records[j][4] == key:
            if records[j][3] > newest[3]:
                newest = records[j]
            j += 1
        if newest[5] is not None:
            out.append((key, newest[5]))
        i = j
    return out


class DirectBackend:
    """Serves fetches from the arena through the read-side page table."""

    channel = "host"

    def __init__(self, arena: Arena, table: PageTable):
        self.arena = arena
        self.table = table

    def fetch(self, meta: RequestMeta, f: Fetch) -> tuple[int, bytes]:
        addr = f.addr or meta.nat.get(f.lid, 0)
        if not addr:
            addr = self.table.read.resolve(f.lid)
            meta.nat[f.lid] = addr
        data = self.arena.read(addr, f.offset, f.length)
        meta.fetches += 1
        meta.bytes_fetched += f.length
        if meta.trace is not None:
            meta.trace.append(TraceEntry(meta.seq, f.lid, addr, f.block, f.offset, f.length,
                                         self.channel, f.interior))
        return addr, data


@dataclass
class ReadMetrics:
    admitted: int = 0
    completed: int = 0
    overloaded: int = 0
    fetches: int = 0
    bytes_fetched: int = 0


class ReadEngine:
    def __init__(self, arena: Arena, table: PageTable, versions: GlobalVersions,
                 slots: int = 64, max_items: int = 4096, max_bytes: int = 1 << 20,
                 backend=None, trace: bool = False):
        self.arena = arena
        self.table = table
        self.versions = versions
        self.slots = slots
        self.max_items = max_items
        self.max_bytes = max_bytes
        self.backend = backend or DirectBackend(arena, table)
        self.trace = trace
        self.metrics = ReadMetrics()
        self._lock = threading.Lock()
        self._inflight: set[int] = set()
        self.s_new = 0

    # request window

    def admit(self, op: str, lower: bytes, upper: bytes | None = None) -> RequestMeta:
        check_key(lower)
        upper = lower if upper is None else upper
        check_key(upper)
        if lower > upper:
            raise ValueError("scan lower bound exceeds upper bound")
        with self._lock:
            if len(self._inflight) >= self.slots:
                self.metrics.overloaded += 1
                raise Overloaded(f"{self.slots} requests in flight")
            self.s_new += 1
            seq = self.s_new
            self._inflight.add(seq)
            read_version = self.versions.reader_read_version
            root, height = self.table.read.root_for(read_version)
            self.metrics.admitted += 1
        return RequestMeta(seq, read_version, op, lower, upper, root, height,
                           trace=[] if self.trace else None)

    def complete(self, meta: RequestMeta) -> None:
        with self._lock:
            self._inflight.discard(meta.seq)
            self.metrics.completed += 1
            self.metrics.fetches += meta.fetches
            self.metrics.bytes_fetched += meta.bytes_fetched

    @property
    def s_old(self) -> int:
        with self._lock:
            return min(self._inflight) if self._inflight else self.s_new

    def window(self) -> tuple[int, int, int]:
        """(S_old, S_new, inflight count) as one consistent snapshot."""
        with self._lock:
            inflight = len(self._inflight)
            s_old = min(self._inflight) if inflight else self.s_new
            return s_old, self.s_new, inflight

    # direct execution

    def execute(self, meta: RequestMeta, backend=None):
        backend = backend or self.backend
        gen = self.pipeline(meta)
        try:
            f = next(gen)
            while True:
                f = gen.send(backend.fetch(meta, f))
        except StopIteration as stop:
            return stop.value
        finally:
            self.complete(meta)

    def get(self, key: bytes) -> bytes | None:
        return self.execute(self.admit("get", key))

    def scan(self, lower: bytes, upper: bytes) -> list[tuple[bytes, bytes]]:
        return self.execute(self.admit("scan", lower, upper))

    # the pipeline

    def pipeline(self, meta: RequestMeta) -> Pipeline:
        if meta.op == "get":
            items = yield from self._point(meta)
            return next((v for k, v in items if k == meta.lower), None)
        return (yield from self._range(meta))

    def _visit(self, meta: RequestMeta, lid: int, interior: bool):
        """Header and shortcut block of the node version visible to the request."""
        meta.lid, meta.block, meta.offset = lid, "header", 0
        addr, head = yield Fetch(lid, 0, SORTED_START, interior)
        header = read_header(head)
        while header.node_version > meta.read_version:
            link = header.old_version_link
            if not link:
                raise CorruptNode(f"no version of lid {lid} visible at {meta.read_version}")
            addr, head = yield Fetch(lid, 0, SORTED_START, interior, addr=link)
            header = read_header(head)
        return addr, head, header

    def _segments(self, addr: int, head: bytes, header: Header) -> list[Segment]:
        return self.arena.cached(addr, "segments", lambda: segments(
            header, read_shortcuts(head, header.shortcut_count)))

    def _segment_items(self, addr: int, seg: Segment, data: bytes,
                       node_type: NodeType) -> list[SortedItem]:
        return self.arena.cached(addr, ("seg", seg.offset), lambda: parse_segment(
            data, seg.offset, seg.covering_key, node_type))

    def _descend(self, meta: RequestMeta, key: bytes, strict: bool = False):
        """Walk to the leaf covering ``key`` (or the leaf just below ``key`` when strict).

        Returns (lid, addr, head, header, low_fence, high_fence).
        """
        lid, level = meta.root_lid, meta.height - 1
        low = high = None
        while True:
            meta.level = level
            addr, head, header = yield from self._visit(meta, lid, level > 0)
            if header.is_leaf:
                return lid, addr, head, header, low, high
            segs = self._segments(addr, head, header)
            idx = 0
            for s in range(1, len(segs)):
                ck = segs[s].covering_key
                if ck < key or (not strict and ck == key):
                    idx = s
                else:
                    break
            seg = segs[idx]
            meta.block, meta.offset = "sorted", seg.offset
            _, data = yield Fetch(lid, seg.offset, seg.length, True, addr=addr, block="sorted")
            items = self._segment_items(addr, seg, data, NodeType.INTERIOR)
            j = -1
            for n, it in enumerate(items):
                if it.key < key or (not strict and it.key == key):
                    j = n
                else:
                    break
            if j + 1 < len(items):
                high = items[j + 1].key
            elif idx + 1 < len(segs):
                high = segs[idx + 1].covering_key
            if j >= 0:
                low = items[j].key
                lid = items[j].payload
            else:
                lid = header.leftmost_child
            level -= 1

    def _leaf_full(self, meta: RequestMeta, lid: int, addr: int, head: bytes,
                   header: Header) -> Generator:
        meta.block, meta.offset = "sorted", SORTED_START
        items: list[SortedItem] = []
        if header.log_boundary > SORTED_START:
            _, data = yield Fetch(lid, SORTED_START, header.log_boundary - SORTED_START, False,
                                  addr=addr, block="sorted")
            for seg in self._segments(addr, head, header):
                chunk = data[seg.offset - SORTED_START:seg.end - SORTED_START]
                items.extend(self._segment_items(addr, seg, chunk, NodeType.LEAF))
        entries = yield from self._log(meta, lid, addr, header)
        return merge_leaf(items, entries, header.node_version, meta.read_version)

    def _log(self, meta: RequestMeta, lid: int, addr: int, header: Header):
        if header.bytes_used <= header.log_boundary:
            return []
        meta.block, meta.offset = "log", header.log_boundary
        _, data = yield Fetch(lid, header.log_boundary, header.log_bytes, False,
                              addr=addr, block="log")
        return read_log(data, header.log_boundary, header.bytes_used, base=header.log_boundary)

    def _point(self, meta: RequestMeta):
        """scan(K, K) restricted to the one segment that can hold K."""
        key = meta.lower
        lid, addr, head, header, _, _ = yield from self._descend(meta, key)
        segs = self._segments(addr, head, header)
        idx = 0
        for s in range(1, len(segs)):
            if segs[s].covering_key <= key:
                idx = s
            else:
                break
        items: list[SortedItem] = []
        seg = segs[idx]
        if seg.length:
            meta.block, meta.offset = "sorted", seg.offset
            _, data = yield Fetch(lid, seg.offset, seg.length, False, addr=addr, block="sorted")
            items = self._segment_items(addr, seg, data, NodeType.LEAF)
        entries = yield from self._log(meta, lid, addr, header)
        live = merge_leaf(items, entries, header.node_version, meta.read_version)
        pos = bisect.bisect_right(live, (key, b"\xff" * 470))
        return live[pos - 1:pos] if pos else []

    def _range(self, meta: RequestMeta):
        lower, upper = meta.lower, meta.upper
        lid, addr, head, header, low, high = yield from self._descend(meta, lower)
        live = yield from self._leaf_full(meta, lid, addr, head, header)
        pos = bisect.bisect_right(live, (lower, b"\xff" * 470))
        result: list[tuple[bytes, bytes]] = []
        size = 0
        if pos:
            result.append(live[pos - 1])
        else:
            fence = low
            while fence is not None:
                plid, paddr, phead, pheader, plow, _ = yield from self._descend(
                    meta, fence, strict=True)
                plive = yield from self._leaf_full(meta, plid, paddr, phead, pheader)
                cands = [kv for kv in plive if kv[0] < fence]
                if cands:
                    result.append(cands[-1])
                    break
                fence = plow
        size = sum(len(k) + len(v) for k, v in result)

        def take(items) -> bool:
            nonlocal size
            for k, v in items:
                if k > upper:
                    return True
                if k > lower:
                    result.append((k, v))
                    size += len(k) + len(v)
                    if len(result) > self.max_items or size > self.max_bytes:
                        raise ResultTooLarge(
                            f"scan exceeds {self.max_items} items or {self.max_bytes} bytes")
            return False

        done = take(live) or (high is not None and high > upper)
        right = header.right_sibling
        while not done and right:
            addr, head, header = yield from self._visit(meta, right, False)
            live = yield from self._leaf_full(meta, right, addr, head, header)
            done = take(live)
            right = header.right_sibling
        meta.result = result
        return result
