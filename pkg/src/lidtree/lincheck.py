"""Linearizability checking for concurrent key-value histories.

Depth-first search over linearization orders with memoization on
(set of linearized operations, model state), in the style of the
Wing-Gong algorithm with Lowe's state cache.
"""

from __future__ import annotations

import bisect
import threading
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

from .write_engine import WriteResult


READS = frozenset({"get", "scan"})


@dataclass(frozen=True)
class Operation:
    client: int
    kind: str  # get | put | update | delete | scan
    args: tuple
    result: Any
    call: float
    ret: float


def scan_model(state: dict[bytes, bytes], lower: bytes, upper: bytes) -> list[tuple[bytes, bytes]]:
    """Reference scan: the largest key <= lower, then every key in (lower, upper]."""
    keys = sorted(state)
    i = bisect.bisect_right(keys, lower)
    start = i - 1 if i and keys[i - 1] <= lower else i
    end = bisect.bisect_right(keys, upper)
    return [(k, state[k]) for k in keys[start:end]]


def apply(state: dict[bytes, bytes], op: Operation) -> tuple[Any, dict[bytes, bytes]]:
    """(expected result, next state) of ``op`` applied to ``state``."""
    kind, args = op.kind, op.args
    if kind == "get":
        return state.get(args[0]), state
    if kind == "scan":
        return scan_model(state, args[0], args[1]), state
    key = args[0]
    present = key in state
    if kind == "put":
        nxt = dict(state)
        nxt[key] = args[1]
        return (WriteResult.UPDATED if present else WriteResult.INSERTED), nxt
    if kind == "update":
        if not present:
            return WriteResult.NOT_FOUND, state
        nxt = dict(state)
        nxt[key] = args[1]
        return WriteResult.UPDATED, nxt
    if kind == "delete":
        if not present:
            return WriteResult.NOT_FOUND, state
        nxt = dict(state)
        del nxt[key]
        return WriteResult.DELETED, nxt
    raise ValueError(f"unknown operation {kind!r}")


def _normalize(result: Any) -> Any:
    if isinstance(result, list):
        return [tuple(x) for x in result]
    return result


@dataclass
class CheckResult:
    ok: bool
    order: list[int] = field(default_factory=list)
    explored: int = 0


def check(history: Sequence[Operation], initial: dict[bytes, bytes] | None = None,
          budget: int = 5_000_000) -> CheckResult:
    """Search for a legal sequential order consistent with real-time precedence."""
    ops = list(history)
    n = len(ops)
    if n == 0:
        return CheckResult(True)
    order_by_call = sorted(range(n), key=lambda i: ops[i].call)
    full = (1 << n) - 1
    seen: set[tuple[int, frozenset]] = set()
    explored = 0
    path: list[int] = []

    def search(done: int, state: dict[bytes, bytes]) -> bool:
        nonlocal explored
        if done == full:
            return True
        key = (done, frozenset(state.items()))
        if key in seen:
            return False
        seen.add(key)
        explored += 1
        if explored > budget:
            raise RuntimeError("linearizability search budget exhausted")
        pending = [i for i in order_by_call if not done >> i & 1]
        horizon = min(ops[i].ret for i in pending)
        candidates = [i for i in pending if ops[i].call <= horizon]
        # a minimal read that matches now can be placed now without loss
        for i in candidates:
            op = ops[i]
            if op.kind in READS and _normalize(op.result) == apply(state, op)[0]:
                path.append(i)
                if search(done | 1 << i, state):
                    return True
                path.pop()
                return False
        for i in candidates:
            op = ops[i]
            if op.kind in READS:
                continue
            expected, nxt = apply(state, op)
            if _normalize(op.result) != expected:
                continue
            path.append(i)
            if search(done | 1 << i, nxt):
                return True
            path.pop()
        return False

    ok = search(0, dict(initial or {}))
    return CheckResult(ok, list(path) if ok else [], explored)


class Recorder:
    """Thread-safe history capture around store calls."""

    def __init__(self):
        self._lock = threading.Lock()
        self.history: list[Operation] = []

    def call(self, client: int, store, kind: str, *args) -> Any:
        start = time.perf_counter()
        result = getattr(store, kind)(*args)
        end = time.perf_counter()
        with self._lock:
            self.history.append(Operation(client, kind, args, result, start, end))
        return result
