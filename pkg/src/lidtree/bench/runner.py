"""Load and run phases against an in-process store or a server."""

from __future__ import annotations

import random
import threading
import time
from collections import Counter
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..memsim import SimBackend, SimConfig, flatten_stats
from ..service.client import Client
from ..service.protocol import Opcode, Request, Response, Status
from ..store import Store
from .workload import KeySpace, Op, Operation, OperationStream, WorkloadSpec


@dataclass
class LoadReport:
    pairs: int
    height: int
    footprint_bytes: int
    data_bytes: int
    seconds: float
    collisions: int = 0

    @property
    def ratio(self) -> float | None:
        return self.footprint_bytes / self.data_bytes if self.data_bytes else None

    def describe(self) -> str:
        ratio = f"{self.ratio:.3f}" if self.ratio is not None else "n/a"
        return (f"loaded {self.pairs} pairs in {self.seconds:.2f}s, height {self.height}, "
                f"footprint {self.footprint_bytes} B for {self.data_bytes} B of data "
                f"(ratio {ratio})")


def load(spec: WorkloadSpec, store: Store) -> tuple[KeySpace, LoadReport]:
    """Bulk-load ``spec.key_count`` unique random keys into an empty store."""
    space = KeySpace(spec, random.Random(spec.seed))
    start = time.perf_counter()
    items = space.populate(spec.key_count)
    height = store.load(items)
    seconds = time.perf_counter() - start
    data = len(items) * (spec.key_size + spec.value_size)
    return space, LoadReport(len(items), height, store.footprint_bytes, data, seconds,
                             space.collisions)


@dataclass
class RunMetrics:
    workload: str
    distribution: str
    read_pct: float
    threads: int
    operations: int
    seconds: float
    latencies: list[float] = field(default_factory=list, repr=False)
    counts: Counter = field(default_factory=Counter)
    errors: int = 0
    backend: str = "direct"
    store_stats: dict[str, Any] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def throughput(self) -> float:
        return self.operations / self.seconds if self.seconds > 0 else 0.0

    def percentile(self, q: float) -> float:
        return float(np.percentile(self.latencies, q)) if self.latencies else 0.0

    def row(self) -> dict[str, Any]:
        s = self.store_stats
        reads = s.get("reads", 0)
        row: dict[str, Any] = {
            "workload": self.workload,
            "distribution": self.distribution,
            "read_pct": self.read_pct,
            "threads": self.threads,
            "operations": self.operations,
            "seconds": round(self.seconds, 6),
            "throughput": round(self.throughput, 2),
            "p50_us": round(self.percentile(50) * 1e6, 2),
            "p99_us": round(self.percentile(99) * 1e6, 2),
            "bytes_per_op": round(s["bytes_fetched"] / reads, 2) if reads else "",
            "merges": s.get("merges", ""),
            "splits": s.get("splits", ""),
            "errors": self.errors,
            "backend": self.backend,
        }
        for op in Op:
            row[f"n_{op.value}"] = self.counts.get(op.value, 0)
        row.update(self.extra)
        return row


def _store_counters(store: Store) -> dict[str, int]:
    w = store.writer.metrics
    r = store.reader.metrics
    return {"merges": w.merges, "splits": w.splits + w.interior_splits,
            "bytes_fetched": r.bytes_fetched, "reads": r.completed}


def execute_local(store: Store, op: Operation) -> None:
    if op.op == Op.READ:
        store.get(op.key)
    elif op.op == Op.SCAN:
        store.scan(op.key, op.upper)
    elif op.op == Op.UPDATE:
        store.update(op.key, op.value)
    elif op.op == Op.INSERT:
        store.put(op.key, op.value)
    else:
        store.get(op.key)
        store.update(op.key, op.value)


def _request(client: Client, op: Operation) -> Request:
    if op.op == Op.READ or op.op == Op.RMW:
        return client.request(Opcode.GET, op.key)
    if op.op == Op.SCAN:
        return client.request(Opcode.SCAN, op.key, op.upper)
    if op.op == Op.UPDATE:
        return client.request(Opcode.UPDATE, op.key, value=op.value)
    return client.request(Opcode.PUT, op.key, value=op.value)


def run(spec: WorkloadSpec, space: KeySpace, store: Store | None = None,
        connect: tuple[str, int] | None = None, backend: str = "direct",
        sim_config: SimConfig | None = None) -> RunMetrics:
    """Closed-loop run with ``spec.threads`` clients, each with a private stream."""
    if (store is None) == (connect is None):
        raise ValueError("run needs exactly one of a store or a server address")
    sim = previous = None
    if backend == "sim":
        if store is None:
            raise ValueError("the simulated backend needs an in-process store")
        sim = SimBackend(store, sim_config)
        previous, store.reader.backend = store.reader.backend, sim
    before = _store_counters(store) if store is not None else {}
    per_thread = [spec.operations // spec.threads + (1 if i < spec.operations % spec.threads
                                                       else 0) for i in range(spec.threads)]
    streams = [OperationStream(spec, space, spec.seed * 1009 + i + 1)
               for i in range(spec.threads)]
    lock = threading.Lock()
    metrics = RunMetrics(spec.name, spec.distribution, spec.read_pct, spec.threads, 0, 0.0,
                         backend=backend)
    deadline = None
    failures: list[BaseException] = []

    def record(latencies: list[float], counts: Counter, errors: int) -> None:
        with lock:
            metrics.latencies.extend(latencies)
            metrics.counts.update(counts)
            metrics.operations += sum(counts.values())
            metrics.errors += errors

    def local_client(i: int) -> None:
        stream, lat, counts = streams[i], [], Counter()
        for _ in range(per_thread[i]):
            if deadline is not None and time.perf_counter() > deadline:
                break
            op = stream.next()
            t0 = time.perf_counter()
            execute_local(store, op)
            lat.append(time.perf_counter() - t0)
            counts[op.op.value] += 1
        record(lat, counts, 0)

    def remote_client(i: int) -> None:
        stream, counts = streams[i], Counter()
        errors = 0
        with Client(*connect, window=max(1, spec.pipeline_depth)) as client:
            ops: dict[int, Operation] = {}

            def source():
                for _ in range(per_thread[i]):
                    if deadline is not None and time.perf_counter() > deadline:
                        return
                    op = stream.next()
                    req = _request(client, op)
                    ops[req.request_id] = op
                    yield req

            def follow_up(req: Request, resp: Response) -> Request | None:
                nonlocal errors
                op = ops.pop(req.request_id, None)
                if resp.status in (Status.ERR, Status.OVERLOADED):
                    errors += 1
                if op is not None and op.op == Op.RMW:
                    counts[op.op.value] += 1
                    return client.request(Opcode.UPDATE, op.key, value=op.value)
                if op is not None:
                    counts[op.op.value] += 1
                return None

            lat: list[float] = []
            client.pipeline(source(), follow_up=follow_up, latencies=lat)
        record(lat, counts, errors)

    target: Callable[[int], None] = local_client if store is not None else remote_client

    def guarded(i: int) -> None:
        try:
            target(i)
        except BaseException as exc:  # surfaced after join
            with lock:
                failures.append(exc)

    start = time.perf_counter()
    if spec.duration:
        deadline = start + spec.duration
    threads = [threading.Thread(target=guarded, args=(i,)) for i in range(spec.threads)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    metrics.seconds = time.perf_counter() - start
    if failures:
        raise failures[0]
    if store is not None:
        after = _store_counters(store)
        metrics.store_stats = {k: after[k] - before[k] for k in after}
    if sim is not None:
        store.reader.backend = previous
        sim.detach()
        metrics.extra = {f"sim_{k}": v for k, v in flatten_stats(sim.stats()).items()}
    return metrics

