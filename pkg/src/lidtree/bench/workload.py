"""Workload definitions and key-choice distributions."""

from __future__ import annotations

import bisect
import random
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv64(value: int) -> int:
    h = FNV_OFFSET
    for _ in range(8):
        h ^= value & 0xFF
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
        value >>= 8
    return h


class Op(str, Enum):
    READ = "read"
    SCAN = "scan"
    UPDATE = "update"
    INSERT = "insert"
    RMW = "rmw"


@dataclass(frozen=True)
class WorkloadSpec:
    name: str = "A"
    read_op: str = "lookup"  # lookup | scan
    write_op: str = "update"  # update | insert | read-modify-write
    read_pct: float = 50.0
    scan_min: int = 1
    scan_max: int = 100
    key_size: int = 16
    value_size: int = 16
    key_count: int = 128 * 1024
    distribution: str = "zipfian"  # uniform | zipfian | latest
    theta: float = 0.99
    operations: int = 100_000
    duration: float | None = None
    threads: int = 1
    pipeline_depth: int = 1
    seed: int = 1

    def __post_init__(self):
        if not 0.0 <= self.read_pct <= 100.0:
            raise ValueError("read_pct must lie in [0, 100]")
        if self.distribution not in ("uniform", "zipfian", "latest"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if self.read_op not in ("lookup", "scan"):
            raise ValueError(f"unknown read op {self.read_op!r}")
        if self.write_op not in ("update", "insert", "read-modify-write"):
            raise ValueError(f"unknown write op {self.write_op!r}")
        if self.key_size < 1 or self.scan_min < 1 or self.scan_max < self.scan_min:
            raise ValueError("bad key size or scan length range")


WORKLOADS: dict[str, WorkloadSpec] = {
    "A": WorkloadSpec("A", "lookup", "update", 50.0),
    "B": WorkloadSpec("B", "lookup", "update", 95.0),
    "C": WorkloadSpec("C", "lookup", "update", 100.0),
    "D": WorkloadSpec("D", "lookup", "insert", 95.0, distribution="latest"),
    "E": WorkloadSpec("E", "scan", "insert", 95.0),
    "F": WorkloadSpec("F", "lookup", "read-modify-write", 50.0),
    "cloud": WorkloadSpec("cloud", "scan", "insert", 50.0, distribution="uniform"),
}


def workload(name: str, **overrides) -> WorkloadSpec:
    try:
        base = WORKLOADS[name]
    except KeyError:
        raise ValueError(f"unknown workload {name!r}; choose from {', '.join(WORKLOADS)}") \
            from None
    return replace(base, **{k: v for k, v in overrides.items() if v is not None})


def zeta(n: int, theta: float) -> float:
    return float(np.sum(1.0 / np.arange(1, n + 1, dtype=np.float64) ** theta))


class ZipfianGenerator:
    """Ranks in [0, n) with P(rank r) proportional to 1/(r+1)^theta (Gray et al.)."""

    def __init__(self, n: int, theta: float = 0.99, rng: random.Random | None = None):
        if n < 1:
            raise ValueError("zipfian needs at least one item")
        if not 0.0 < theta < 1.0:
            raise ValueError("zipfian theta must lie in (0, 1)")
        self.rng = rng or random.Random()
        self.theta = theta
        self._zeta2 = zeta(2, theta)
        self.n = 0
        self._zetan = 0.0
        self.resize(n)

    def resize(self, n: int) -> None:
        """Grow the item count, extending zeta incrementally."""
        if n < self.n:
            raise ValueError("zipfian item count cannot shrink")
        if n > self.n:
            extra = np.arange(self.n + 1, n + 1, dtype=np.float64)
            self._zetan += float(np.sum(1.0 / extra ** self.theta))
            self.n = n
        self._alpha = 1.0 / (1.0 - self.theta)
        self._eta = (1 - (2.0 / self.n) ** (1 - self.theta)) / (1 - self._zeta2 / self._zetan) \
            if self.n > 1 else 0.0

    def probability(self, rank: int) -> float:
        return 1.0 / (rank + 1) ** self.theta / self._zetan

    def next(self) -> int:
        if self.n == 1:
            return 0
        u = self.rng.random()
        uz = u * self._zetan
        if uz < 1.0:
            return 0
        if uz < 1.0 + 0.5 ** self.theta:
            return 1
        return min(self.n - 1, int(self.n * (self._eta * u - self._eta + 1) ** self._alpha))


class KeyChooser:
    """Index chooser over a growing key population."""

    def __init__(self, distribution: str, n: int, theta: float, rng: random.Random):
        self.distribution = distribution
        self.rng = rng
        self.n = n
        self.zipf = ZipfianGenerator(max(n, 1), theta, rng) if distribution != "uniform" \
            else None

    def grow(self, n: int) -> None:
        self.n = n
        if self.zipf is not None and n > self.zipf.n:
            self.zipf.resize(n)

    def next(self) -> int:
        n = self.n
        if self.distribution == "uniform":
            return self.rng.randrange(n)
        rank = self.zipf.next() % n
        if self.distribution == "latest":
            return n - 1 - rank
        return fnv64(rank) % n


@dataclass(frozen=True)
class Operation:
    op: Op
    key: bytes
    upper: bytes = b""
    value: bytes = b""


class KeySpace:
    """Keys in insertion order plus a sorted copy of the loaded keys for scans."""

    def __init__(self, spec: WorkloadSpec, rng: random.Random):
        self.spec = spec
        self.rng = rng
        self.keys: list[bytes] = []
        self._present: set[bytes] = set()
        self.sorted_loaded: list[bytes] = []
        self.scan_bounds: list[tuple[bytes, bytes]] = []
        self.collisions = 0

    def fresh_key(self, rng: random.Random | None = None) -> bytes:
        rng = rng or self.rng
        while True:
            key = rng.randbytes(self.spec.key_size)
            if key not in self._present:
                self._present.add(key)
                self.keys.append(key)
                return key
            self.collisions += 1

    def populate(self, count: int) -> list[tuple[bytes, bytes]]:
        value = self.value()
        for _ in range(count):
            self.fresh_key()
        self.sorted_loaded = sorted(self.keys)
        loaded = self.sorted_loaded
        # each pair spans exactly three loaded keys
        self.scan_bounds = [(loaded[i], loaded[i + 2]) for i in range(0, len(loaded) - 2, 3)]
        return [(k, value) for k in self.sorted_loaded]

    def value(self, rng: random.Random | None = None) -> bytes:
        return (rng or self.rng).randbytes(self.spec.value_size)


class OperationStream:
    """Deterministic operation sequence for one client."""

    def __init__(self, spec: WorkloadSpec, space: KeySpace, seed: int):
        self.spec = spec
        self.space = space
        self.rng = random.Random(seed)
        self.chooser = KeyChooser(spec.distribution, max(len(space.keys), 1), spec.theta,
                                  self.rng)

    def _existing(self) -> bytes:
        keys = self.space.keys
        self.chooser.grow(len(keys))
        return keys[self.chooser.next()]

    def _scan(self) -> Operation:
        spec = self.spec
        if spec.name == "cloud":
            bounds = self.space.scan_bounds
            if not bounds:
                key = self._existing()
                return Operation(Op.SCAN, key, key)
            lower, upper = bounds[self.rng.randrange(len(bounds))]
            return Operation(Op.SCAN, lower, upper)
        loaded = self.space.sorted_loaded
        start = self._existing()
        length = self.rng.randint(spec.scan_min, spec.scan_max)
        pos = bisect.bisect_left(loaded, start)
        upper = loaded[min(pos + length - 1, len(loaded) - 1)] if loaded else start
        return Operation(Op.SCAN, start, max(start, upper))

    def next(self) -> Operation:
        spec = self.spec
        rng = self.rng
        if not self.space.keys:
            key = self.space.fresh_key(rng)
            return Operation(Op.INSERT, key, value=self.space.value(rng))
        if self.rng.random() * 100.0 < spec.read_pct:
            if spec.read_op == "scan":
                return self._scan()
            return Operation(Op.READ, self._existing())
        if spec.write_op == "insert":
            key = self.space.fresh_key(rng)
            return Operation(Op.INSERT, key, value=self.space.value(rng))
        if spec.write_op == "read-modify-write":
            return Operation(Op.RMW, self._existing(), value=self.space.value(rng))
        return Operation(Op.UPDATE, self._existing(), value=self.space.value(rng))

    def take(self, n: int) -> list[Operation]:
        return [self.next() for _ in range(n)]
