"""Discrete-event model of the accelerator's memory subsystem.

Two channels (the host link and on-board DRAM) are FIFO servers with a
bandwidth and a fixed latency.  Interior nodes are cached in on-board DRAM in
a set-associative cache indexed by LID with a 256-byte chunk occupancy map;
leaves always come over the host link.  The simulator changes timing and
channel choice only: the bytes a request sees are the ones the direct
backend would return.
"""

from __future__ import annotations

import bisect
import csv
import heapq
import itertools
import json
import random
import threading
import time
from collections import OrderedDict, defaultdict
from collections.abc import Callable, Iterable, Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .node_format import CHUNK_SIZE, NODE_SIZE
from .read_engine import TraceEntry

CATEGORIES = ("node", "page_table", "metadata")


@dataclass
class SimConfig:
    host_bandwidth: float = 13e9
    host_latency: float = 1.2e-6
    board_bandwidth: float = 34e9
    board_latency: float = 0.15e-6
    cache_bytes: int = 256 << 20
    ways: int = 4
    root_cache: bool = True
    balancer: bool = True
    metadata_entries: int = 1024
    metadata_bytes: int = 64
    page_table_entry_bytes: int = 8
    compute_latency: float = 20e-9
    bucket: float = 1e-4
    seed: int = 0

    @classmethod
    def from_mapping(cls, data: dict[str, Any]) -> SimConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown simulator settings: {', '.join(sorted(unknown))}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> SimConfig:
        text = Path(path).read_text()
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        return cls.from_mapping(data or {})


class Channel:
    """A link that moves one transfer at a time.  A transfer occupies the link
    for size/bandwidth in the earliest idle gap at or after its ready time,
    then completes after the fixed latency."""

    def __init__(self, name: str, bandwidth: float, latency: float, bucket: float = 1e-4):
        self.name = name
        self.bandwidth = bandwidth
        self.latency = latency
        self.bucket = bucket
        self.clock = 0.0
        self._busy: list[tuple[float, float]] = []  # reserved (start, end), by start
        self._pending: list[tuple[float, int]] = []
        self.reset_stats()

    def reset_stats(self) -> None:
        self.read_bytes = defaultdict(int)
        self.write_bytes = defaultdict(int)
        self.read_ops = defaultdict(int)
        self.write_ops = defaultdict(int)
        self.busy_time = 0.0
        self.series: dict[int, int] = defaultdict(int)

    @property
    def busy_until(self) -> float:
        return self._busy[-1][1] if self._busy else 0.0

    def advance(self, now: float) -> None:
        """Move the clock; no later transfer can be ready before ``now``."""
        if now <= self.clock:
            return
        self.clock = now
        done = 0
        while done < len(self._busy) and self._busy[done][1] <= now:
            done += 1  # reservations never overlap, so their ends are ordered too
        del self._busy[:done]

    def _slot(self, ready: float, service: float) -> float:
        start = max(ready, self.clock)
        for s, e in self._busy:
            if e <= start:
                continue
            if s >= start + service:
                break
            start = e
        return start

    def _settle(self, now: float) -> None:
        while self._pending and self._pending[0][0] <= now:
            heapq.heappop(self._pending)

    def inflight(self, now: float) -> tuple[int, int]:
        """(operations, bytes) submitted but not yet complete at ``now``."""
        self._settle(now)
        return len(self._pending), sum(b for _, b in self._pending)

    def projected(self, now: float, nbytes: int) -> float:
        service = nbytes / self.bandwidth
        return self._slot(now, service) + service + self.latency

    def reserve(self, start: float, end: float) -> None:
        """Mark the link busy over [start, end), e.g. for traffic outside the model."""
        bisect.insort(self._busy, (start, end))

    def submit(self, now: float, nbytes: int, category: str = "node",
               write: bool = False) -> float:
        service = nbytes / self.bandwidth
        start = self._slot(now, service)
        bisect.insort(self._busy, (start, start + service))
        done = start + service + self.latency
        heapq.heappush(self._pending, (done, nbytes))
        self._settle(now)
        self.busy_time += service
        if write:
            self.write_bytes[category] += nbytes
            self.write_ops[category] += 1
        else:
            self.read_bytes[category] += nbytes
            self.read_ops[category] += 1
        self.series[int(start / self.bucket)] += nbytes
        return done

    def summary(self, elapsed: float) -> dict[str, Any]:
        reads = sum(self.read_bytes.values())
        writes = sum(self.write_bytes.values())
        ops = sum(self.read_ops.values()) + sum(self.write_ops.values())
        return {
            "read_bytes": reads,
            "write_bytes": writes,
            "ops": ops,
            "bandwidth": (reads + writes) / elapsed if elapsed > 0 else 0.0,
            "iops": ops / elapsed if elapsed > 0 else 0.0,
            "utilization": self.busy_time / elapsed if elapsed > 0 else 0.0,
            "read_bytes_by_category": {c: self.read_bytes[c] for c in CATEGORIES},
            "write_bytes_by_category": {c: self.write_bytes[c] for c in CATEGORIES},
            "ops_by_category": {c: self.read_ops[c] + self.write_ops[c] for c in CATEGORIES},
        }


@dataclass(slots=True)
class Way:
    lid: int = 0
    addr: int = 0
    occupancy: int = 0
    valid: bool = False
    gen: int = 0


def chunk_mask(offset: int, length: int) -> int:
    """Occupancy bits covering [offset, offset + length), rounded out to chunks."""
    if length <= 0:
        return 0
    first = offset // CHUNK_SIZE
    last = (offset + length - 1) // CHUNK_SIZE
    return ((1 << (last - first + 1)) - 1) << first


class InteriorCache:
    """Set-associative tag store; data lives in on-board DRAM."""

    def __init__(self, cache_bytes: int, ways: int, rng: random.Random):
        self.ways = ways
        self.sets = cache_bytes // (NODE_SIZE * ways) if ways else 0
        self.rng = rng
        self._sets: dict[int, list[Way]] = {}
        self.evictions = 0
        self.invalidations = 0

    @property
    def enabled(self) -> bool:
        return self.sets > 0

    def index(self, lid: int) -> int:
        return lid % self.sets

    def _set(self, lid: int) -> list[Way]:
        idx = self.index(lid)
        ways = self._sets.get(idx)
        if ways is None:
            ways = self._sets[idx] = [Way() for _ in range(self.ways)]
        return ways

    def lookup(self, lid: int) -> Way | None:
        if not self.enabled:
            return None
        for way in self._sets.get(self.index(lid), ()):
            if way.valid and way.lid == lid:
                return way
        return None

    def allocate(self, lid: int, addr: int) -> Way:
        ways = self._set(lid)
        victim = next((w for w in ways if not w.valid), None)
        if victim is None:
            victim = ways[self.rng.randrange(len(ways))]
            self.evictions += 1
        victim.lid, victim.addr, victim.occupancy, victim.valid = lid, addr, 0, True
        victim.gen += 1
        return victim

    def invalidate(self, lid: int) -> bool:
        way = self.lookup(lid)
        if way is None:
            return False
        way.valid = False
        way.occupancy = 0
        way.gen += 1
        self.invalidations += 1
        return True


@dataclass
class CacheStats:
    interior_accesses: int = 0
    hits: int = 0
    misses: int = 0
    root_hits: int = 0
    diverted: int = 0
    diverted_bytes: int = 0
    address_mismatches: int = 0
    discarded_writebacks: int = 0
    metadata_hits: int = 0
    metadata_misses: int = 0

    @property
    def hit_rate(self) -> float:
        return self.hits / self.interior_accesses if self.interior_accesses else 0.0


class MemoryModel:
    """Timing and channel selection for one fetch."""

    def __init__(self, config: SimConfig, schedule: Callable[[float, Callable[[], None]], None]):
        self.config = config
        self.schedule = schedule
        self.rng = random.Random(config.seed)
        self.host = Channel("host", config.host_bandwidth, config.host_latency, config.bucket)
        self.board = Channel("board", config.board_bandwidth, config.board_latency,
                             config.bucket)
        self.cache = InteriorCache(config.cache_bytes, config.ways, self.rng)
        self.root_tier: dict[int, int] = {}
        self.metadata: OrderedDict[int, None] = OrderedDict()
        self.stats = CacheStats()

    def reset_stats(self) -> None:
        self.host.reset_stats()
        self.board.reset_stats()
        self.stats = CacheStats()

    def _metadata(self, now: float, lid: int, write: bool = False) -> float:
        """Consult (or update) the set metadata, through the on-chip metadata cache."""
        idx = self.cache.index(lid)
        if idx in self.metadata:
            self.metadata.move_to_end(idx)
            self.stats.metadata_hits += 1
            if write:
                self.board.submit(now, self.config.metadata_bytes, "metadata", write=True)
            return now
        self.stats.metadata_misses += 1
        self.metadata[idx] = None
        if len(self.metadata) > self.config.metadata_entries:
            self.metadata.popitem(last=False)
        return self.board.submit(now, self.config.metadata_bytes, "metadata", write=write)

    def access(self, now: float, lid: int, addr: int, offset: int, length: int,
               interior: bool, root: bool = False, nat_miss: bool = False) -> tuple[float, str]:
        """Completion time and serving channel for one fetch."""
        cfg = self.config
        self.host.advance(now)
        self.board.advance(now)
        t = now
        if nat_miss:
            t = self.board.submit(t, cfg.page_table_entry_bytes, "page_table")
        if not interior:
            return self.host.submit(t, length), "host"
        self.stats.interior_accesses += 1
        if root and cfg.root_cache:
            if self.root_tier.get(lid) == addr:
                self.stats.hits += 1
                self.stats.root_hits += 1
                return t, "chip"
            done = self.host.submit(t, NODE_SIZE)
            self.root_tier = {lid: addr}
            self.stats.misses += 1
            return done, "host"
        if not self.cache.enabled:
            self.stats.misses += 1
            return self.host.submit(t, length), "host"
        t = self._metadata(t, lid)
        bits = chunk_mask(offset, length)
        way = self.cache.lookup(lid)
        if way is not None and way.addr == addr and way.occupancy & bits == bits:
            self.stats.hits += 1
            channel = self.board
            if cfg.balancer and self.board.projected(t, length) > self.host.projected(t, length):
                channel = self.host
                self.stats.diverted += 1
                self.stats.diverted_bytes += length
            return channel.submit(t, length), channel.name
        self.stats.misses += 1
        if way is not None and way.addr != addr:
            self.stats.address_mismatches += 1
        done = self.host.submit(t, length)
        if way is None and offset == 0:
            way = self.cache.allocate(lid, addr)
            self._metadata(t, lid, write=True)
        if way is not None and way.addr == addr:
            start = offset // CHUNK_SIZE * CHUNK_SIZE
            end = -(-(offset + length) // CHUNK_SIZE) * CHUNK_SIZE
            written = self.board.submit(done, end - start, "node", write=True)
            gen = way.gen

            def fill(way=way, gen=gen, bits=bits, lid=lid):
                if way.valid and way.gen == gen and way.lid == lid:
                    way.occupancy |= bits
                else:
                    self.stats.discarded_writebacks += 1
            self.schedule(written, fill)
        return done, "host"

    def invalidate(self, lid: int) -> None:
        self.cache.invalidate(lid)
        self.root_tier.pop(lid, None)


@dataclass(frozen=True, slots=True)
class TraceRecord:
    seq: int
    lid: int
    offset: int
    length: int
    is_interior: bool
    addr: int = 0
    root: bool = False
    chain: bool = False


TRACE_FIELDS = ("seq", "lid", "offset", "len", "is_interior", "addr", "root", "chain")


def write_trace(records: Iterable[TraceRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for r in records:
            w.writerow([r.seq, r.lid, r.offset, r.length, int(r.is_interior), r.addr,
                        int(r.root), int(r.chain)])


def read_trace(path: str | Path) -> list[TraceRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(TraceRecord(int(row["seq"]), int(row["lid"]), int(row["offset"]),
                                   int(row["len"]), row["is_interior"] == "1",
                                   int(row.get("addr") or 0), row.get("root") == "1",
                                   row.get("chain") == "1"))
    return out


@dataclass
class SimResult:
    results: list[Any]
    latencies: list[float]
    elapsed: float
    stats: dict[str, Any]
    trace: list[TraceRecord] = field(default_factory=list)


class _Request:
    __slots__ = ("meta", "gen", "start", "index", "fetches", "seen")

    def __init__(self, index: int, start: float):
        self.index = index
        self.start = start
        self.meta = None
        self.gen = None
        self.fetches: list = []
        self.seen: set[int] = set()


class Simulator:
    """Event loop driving read requests (live or replayed) through the model."""

    def __init__(self, config: SimConfig | None = None, store=None):
        self.config = config or SimConfig()
        self.store = store
        self.now = 0.0
        self._events: list = []
        self._ids = itertools.count()
        self.model = MemoryModel(self.config, self.schedule)
        if store is not None:
            store.table.read.listeners.append(self.model.invalidate)
        self._window_start = 0.0
        self._completed = 0
        self._latencies: list[float] = []

    def schedule(self, at: float, fn: Callable[[], None]) -> None:
        heapq.heappush(self._events, (at, next(self._ids), fn))

    def _loop(self) -> None:
        while self._events:
            at, _, fn = heapq.heappop(self._events)
            self.now = max(self.now, at)
            fn()

    def reset_stats(self) -> None:
        self.model.reset_stats()
        self._window_start = self.now
        self._completed = 0
        self._latencies = []

    def close(self) -> None:
        if self.store is not None:
            listeners = self.store.table.read.listeners
            if self.model.invalidate in listeners:
                listeners.remove(self.model.invalidate)

    # live requests against a store

    def run(self, ops: Sequence[tuple], concurrency: int = 64, warmup: int = 0,
            trace: bool = False) -> SimResult:
        """Execute ``(op, lower[, upper])`` read requests closed-loop.

        The first ``warmup`` requests run before the statistics window opens.
        """
        if self.store is None:
            raise ValueError("live runs need a store")
        if warmup:
            self._drive(list(ops[:warmup]), concurrency, False)
            self.reset_stats()
            ops = ops[warmup:]
        return self._drive(list(ops), concurrency, trace)

    def _drive(self, ops: list, concurrency: int, trace: bool) -> SimResult:
        reader = self.store.reader
        arena = self.store.arena
        table = self.store.table
        results: list[Any] = [None] * len(ops)
        records: list[TraceRecord] = []
        pending = iter(range(len(ops)))
        concurrency = max(1, min(concurrency, reader.slots))

        def issue(req: _Request, f) -> None:
            meta = req.meta
            chain = bool(f.addr)
            nat_miss = False
            addr = f.addr or meta.nat.get(f.lid, 0)
            if not addr:
                addr = table.read.resolve(f.lid)
                meta.nat[f.lid] = addr
                nat_miss = True
            data = arena.read(addr, f.offset, f.length)
            root = f.lid == meta.root_lid and f.interior
            done, channel = self.model.access(self.now, f.lid, addr, f.offset, f.length,
                                              f.interior, root, nat_miss)
            meta.fetches += 1
            meta.bytes_fetched += f.length
            if trace:
                records.append(TraceRecord(meta.seq, f.lid, f.offset, f.length, f.interior,
                                           addr, root, chain))
            self.schedule(done + self.config.compute_latency, lambda: resume(req, (addr, data)))

        def resume(req: _Request, payload) -> None:
            try:
                f = req.gen.send(payload)
            except StopIteration as stop:
                results[req.index] = stop.value
                reader.complete(req.meta)
                self._completed += 1
                self._latencies.append(self.now - req.start)
                start_next()
                return
            except BaseException:
                reader.complete(req.meta)
                raise
            issue(req, f)

        def start_next() -> None:
            i = next(pending, None)
            if i is None:
                return
            op = ops[i]
            req = _Request(i, self.now)
            req.meta = reader.admit(op[0], op[1], op[2] if len(op) > 2 else None)
            req.gen = reader.pipeline(req.meta)
            try:
                f = next(req.gen)
            except StopIteration as stop:  # pragma: no cover - pipelines always fetch
                results[i] = stop.value
                reader.complete(req.meta)
                start_next()
                return
            issue(req, f)

        for _ in range(concurrency):
            self.schedule(self.now, start_next)
        self._loop()
        return SimResult(results, list(self._latencies), self.now - self._window_start,
                         self.stats(), records)

    # trace replay without a store

    def replay(self, records: Sequence[TraceRecord], concurrency: int = 64,
               warmup: int = 0) -> SimResult:
        by_seq: dict[int, list[TraceRecord]] = defaultdict(list)
        for r in records:
            by_seq[r.seq].append(r)
        requests = list(by_seq.values())
        if warmup:
            self._replay(requests[:warmup], concurrency)
            self.reset_stats()
            requests = requests[warmup:]
        return self._replay(requests, concurrency)

    def _replay(self, requests: list[list[TraceRecord]], concurrency: int) -> SimResult:
        pending = iter(requests)

        def step(req: _Request, fetches: list[TraceRecord], k: int) -> None:
            if k == len(fetches):
                self._completed += 1
                self._latencies.append(self.now - req.start)
                start_next()
                return
            r = fetches[k]
            nat_miss = not r.chain and r.lid not in req.seen
            req.seen.add(r.lid)
            done, _ = self.model.access(self.now, r.lid, r.addr or r.lid, r.offset, r.length,
                                        r.is_interior, r.root, nat_miss)
            self.schedule(done + self.config.compute_latency, lambda: step(req, fetches, k + 1))

        def start_next() -> None:
            fetches = next(pending, None)
            if fetches is None:
                return
            step(_Request(0, self.now), fetches, 0)

        for _ in range(max(1, concurrency)):
            self.schedule(self.now, start_next)
        self._loop()
        return SimResult([], list(self._latencies), self.now - self._window_start, self.stats())

    def stats(self) -> dict[str, Any]:
        elapsed = self.now - self._window_start
        lat = np.array(self._latencies) if self._latencies else np.zeros(1)
        cache = self.model.stats
        return {
            "elapsed": elapsed,
            "requests": self._completed,
            "throughput": self._completed / elapsed if elapsed > 0 else 0.0,
            "latency_p50": float(np.percentile(lat, 50)) if self._latencies else 0.0,
            "latency_p99": float(np.percentile(lat, 99)) if self._latencies else 0.0,
            "host": self.model.host.summary(elapsed),
            "board": self.model.board.summary(elapsed),
            "cache": {**asdict(cache), "hit_rate": cache.hit_rate,
                      "evictions": self.model.cache.evictions,
                      "invalidations": self.model.cache.invalidations},
        }


def flatten_stats(stats: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    """One-level dict for CSV output."""
    out: dict[str, Any] = {}
    for key, value in stats.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten_stats(value, name + "_"))
        else:
            out[name] = value
    return out


def nat_violations(records: Iterable[TraceRecord]) -> int:
    """Fetches that resolved a node to a second address within one request."""
    pinned: dict[tuple[int, int], int] = {}
    bad = 0
    for r in records:
        if r.chain:
            continue
        key = (r.seq, r.lid)
        if pinned.setdefault(key, r.addr) != r.addr:
            bad += 1
    return bad


class SimBackend:
    """Read-engine backend for a live store: serves the same bytes as the
    direct backend while charging each fetch to the model, with wall-clock
    time as the arrival clock."""

    channel = "sim"

    def __init__(self, store, config: SimConfig | None = None):
        self.config = config or SimConfig()
        self.store = store
        self._clock = time.perf_counter
        self._t0 = self._clock()
        self._lock = threading.Lock()
        self._events: list = []
        self._ids = itertools.count()
        self.model = MemoryModel(self.config, self._schedule)
        self.simulated_seconds = 0.0
        store.table.read.listeners.append(self._invalidate)

    def _schedule(self, at: float, fn: Callable[[], None]) -> None:
        heapq.heappush(self._events, (at, next(self._ids), fn))

    def _invalidate(self, lid: int) -> None:
        with self._lock:
            self.model.invalidate(lid)

    def fetch(self, meta, f) -> tuple[int, bytes]:
        table, arena = self.store.table, self.store.arena
        addr = f.addr or meta.nat.get(f.lid, 0)
        nat_miss = False
        if not addr:
            addr = table.read.resolve(f.lid)
            meta.nat[f.lid] = addr
            nat_miss = True
        data = arena.read(addr, f.offset, f.length)
        with self._lock:
            now = self._clock() - self._t0
            while self._events and self._events[0][0] <= now:
                heapq.heappop(self._events)[2]()
            root = f.interior and f.lid == meta.root_lid
            done, channel = self.model.access(now, f.lid, addr, f.offset, f.length,
                                              f.interior, root, nat_miss)
            self.simulated_seconds += done - now
        meta.fetches += 1
        meta.bytes_fetched += f.length
        if meta.trace is not None:
            meta.trace.append(TraceEntry(meta.seq, f.lid, addr, f.block, f.offset, f.length,
                                         channel, f.interior))
        return addr, data

    def stats(self) -> dict[str, Any]:
        elapsed = self._clock() - self._t0
        cache = self.model.stats
        return {
            "elapsed": elapsed,
            "host": self.model.host.summary(elapsed),
            "board": self.model.board.summary(elapsed),
            "cache": {**asdict(cache), "hit_rate": cache.hit_rate,
                      "evictions": self.model.cache.evictions,
                      "invalidations": self.model.cache.invalidations},
            "simulated_fetch_seconds": self.simulated_seconds,
        }

    def detach(self) -> None:
        listeners = self.store.table.read.listeners
        if self._invalidate in listeners:
            listeners.remove(self._invalidate)
