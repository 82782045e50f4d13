"""Helpers shared by the test modules."""

from __future__ import annotations

import bisect


class Stepper:
    """Drives one read request fetch by fetch so tests can interleave writes."""

    def __init__(self, store, op: str, lower: bytes, upper: bytes | None = None):
        self.reader = store.reader
        self.meta = self.reader.admit(op, lower, upper)
        self.gen = self.reader.pipeline(self.meta)
        self.pending = next(self.gen)
        self.done = False
        self.result = None

    def step(self) -> None:
        payload = self.reader.backend.fetch(self.meta, self.pending)
        try:
            self.pending = self.gen.send(payload)
        except StopIteration as stop:
            self.done, self.result, self.pending = True, stop.value, None
            self.reader.complete(self.meta)

    def run_until(self, predicate) -> None:
        """Step until the next fetch satisfies ``predicate`` (or the request ends)."""
        while not self.done and not predicate(self.pending):
            self.step()

    def finish(self):
        while not self.done:
            self.step()
        return self.result


class VersionedMap:
    """Reference map keeping every (version, value) of every key."""

    def __init__(self, initial=None):
        self.history: dict[bytes, list[tuple[int, bytes | None]]] = {}
        self.keys: list[bytes] = []
        for k, v in (initial or {}).items():
            self.record(0, k, v)

    def record(self, version: int, key: bytes, value: bytes | None) -> None:
        if key not in self.history:
            bisect.insort(self.keys, key)
        self.history.setdefault(key, []).append((version, value))

    def value_at(self, key: bytes, version: int) -> bytes | None:
        versions = self.history.get(key, ())
        i = bisect.bisect_right([v for v, _ in versions], version) - 1
        return versions[i][1] if i >= 0 else None

    def scan_at(self, lower: bytes, upper: bytes, version: int) -> list[tuple[bytes, bytes]]:
        """Reference scan at ``version`` touching only keys near the range."""
        out = []
        i = bisect.bisect_right(self.keys, lower)
        j = i - 1
        while j >= 0:  # the largest live key not above lower
            value = self.value_at(self.keys[j], version)
            if value is not None:
                out.append((self.keys[j], value))
                break
            j -= 1
        for key in self.keys[i:bisect.bisect_right(self.keys, upper)]:
            value = self.value_at(key, version)
            if value is not None:
                out.append((key, value))
        return out

    def at(self, version: int) -> dict[bytes, bytes]:
        out = {}
        for k in self.history:
            value = self.value_at(k, version)
            if value is not None:
                out[k] = value
        return out


def leaf_lids(store) -> list[int]:
    """Leaf LIDs in key order."""
    from lidtree.node_format import read_header
    lid = store.table.root[0]
    while True:
        header = read_header(store.arena.buffer(store.table.resolve(lid)))
        if header.is_leaf:
            break
        lid = header.leftmost_child
    out = []
    while lid:
        out.append(lid)
        lid = read_header(store.arena.buffer(store.table.resolve(lid))).right_sibling
    return out
