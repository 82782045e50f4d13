"""Writers: optimistic traversal, sequence-checked node locks, log appends and
copy-on-write restructuring published through one page-table update."""

from __future__ import annotations

import bisect
import logging
import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field
from enum import IntEnum

from .errors import AllocationFailed, CapacityExceeded, ForceMerge, OutOfMemory
from .memory import Arena
from .mvcc import EpochManager, GlobalVersions, ReclaimItem
from .node_format import (
    BLOB_HEADER,
    LID_SIZE,
    MAX_LOG_ENTRIES,
    NODE_SIZE,
    SORTED_START,
    EntryKind,
    Header,
    NodeType,
    append_log_entry,
    check_key,
    check_value,
    encode_interior,
    encode_leaf,
    load_word,
    log_entry_size,
    node_bytes,
    pack_word,
    read_header,
    read_log,
    read_sorted,
    unpack_word,
    write_links,
)
from .page_table import PageTable

log = logging.getLogger(__name__)

LOCK_BIT = 1 << 32


class WriteResult(IntEnum):
    INSERTED = 1
    UPDATED = 2
    DELETED = 3
    NOT_FOUND = 4


class WriteOp(IntEnum):
    PUT = 1
    UPDATE = 2
    DELETE = 3


@dataclass
class WriteMetrics:
    fast_path: int = 0
    merges: int = 0
    splits: int = 0
    interior_splits: int = 0
    node_merges: int = 0
    borrows: int = 0
    root_grows: int = 0
    root_shrinks: int = 0
    restarts: int = 0
    lock_attempts: int = 0
    lock_failures: int = 0
    oom_retries: int = 0

    def as_dict(self) -> dict[str, int]:
        return asdict(self)


@dataclass(slots=True)
class PathNode:
    lid: int
    addr: int
    word: int
    header: Header
    index: int  # position in the parent's child list, 0 = leftmost child


class Restart(Exception):
    """The optimistic attempt observed a conflicting write."""


class _Locks:
    """Node locks held by one attempt, remembering each node's unlocked word."""

    __slots__ = ("arena", "held", "attempts", "failures")

    def __init__(self, arena: Arena):
        self.arena = arena
        self.held: dict[int, int] = {}
        self.attempts = 0
        self.failures = 0

    def take(self, addr: int, word: int) -> bool:
        self.attempts += 1
        if word & LOCK_BIT or not self.arena.compare_and_swap_word(addr, word, word | LOCK_BIT):
            self.failures += 1
            return False
        self.held[addr] = word
        return True

    def take_current(self, addr: int) -> int | None:
        word = load_word(self.arena.buffer(addr))
        return word if self.take(addr, word) else None

    def release_all(self) -> None:
        """Unlock without modification: the sequence number is left as it was."""
        for addr, word in self.held.items():
            self.arena.store_word(addr, word)
        self.held.clear()

    def publish(self, addr: int) -> None:
        """Unlock a node modified in place, bumping its sequence number."""
        bytes_used, seq, _ = unpack_word(self.held.pop(addr))
        self.arena.store_word(addr, pack_word(bytes_used, seq + 1, False))

    def retire(self, addr: int) -> None:
        """Leave a superseded buffer locked for good so stale lock attempts fail."""
        bytes_used, seq, _ = unpack_word(self.held.pop(addr))
        self.arena.store_word(addr, pack_word(bytes_used, seq + 1, True))

    def forget(self, addr: int) -> None:
        self.held.pop(addr, None)


@dataclass(eq=False)
class _NewNode:
    leaf: bool
    level: int
    # leaf: [(key, value)]; interior: [(separator or None, child)] where a
    # child is an existing LID or another _NewNode
    items: list
    old_link: int = 0
    lid: int = 0
    addr: int = 0
    left: int = 0
    right: int = 0


@dataclass(eq=False)
class _Plan:
    kind: str = ""  # remap | grow | shrink
    target: _NewNode | None = None  # new buffer for the remapped LID or the new root
    target_lid: int = 0
    root_child: object = None  # shrink: new root (LID or _NewNode)
    height: int = 0
    fresh: list[_NewNode] = field(default_factory=list)
    old_buffers: list[int] = field(default_factory=list)
    old_lids: list[int] = field(default_factory=list)
    leaves: list[_NewNode] = field(default_factory=list)
    left_neighbor: int = 0
    right_neighbor: int = 0
    first_old_leaf: int = 0
    last_old_leaf: int = 0


def _leaf_item_size(item) -> int:
    return 2 * BLOB_HEADER + len(item[0]) + len(item[1])


def _interior_bytes(entries: Sequence) -> int:
    return node_bytes(NodeType.INTERIOR, [(k, 0) for k, _ in entries[1:]])


def _leaf_bytes(items: Sequence) -> int:
    return node_bytes(NodeType.LEAF, items)


def _balanced_cut(sizes: Sequence[int], lo: int, hi: int) -> int:
    """Index in [lo, hi] whose prefix size is nearest half of the total."""
    total = sum(sizes)
    best, best_gap, run = lo, None, sum(sizes[:lo])
    for m in range(lo, hi + 1):
        gap = abs(2 * run - total)
        if best_gap is None or gap < best_gap:
            best, best_gap = m, gap
        run += sizes[m] if m < len(sizes) else 0
    return best


def split_leaf_items(items: Sequence) -> tuple[list, list]:
    cut = _balanced_cut([_leaf_item_size(it) for it in items], 1, len(items) - 1)
    return list(items[:cut]), list(items[cut:])


def split_entries(entries: Sequence) -> tuple[list, bytes, list]:
    """Split interior entries in two, promoting the separator at the cut."""
    sizes = [LID_SIZE] + [BLOB_HEADER + len(k) + LID_SIZE for k, _ in entries[1:]]
    cut = _balanced_cut(sizes, 1, len(entries) - 1)
    sep, child = entries[cut]
    return list(entries[:cut]), sep, [(None, child)] + list(entries[cut + 1:])


class WriteEngine:
    """put/update/delete against the shared tree."""

    def __init__(self, arena: Arena, table: PageTable, versions: GlobalVersions,
                 epochs: EpochManager, log_threshold: int = 512,
                 underflow_fraction: float = 0.25, backoff_after: int = 8,
                 oom_retries: int = 8):
        self.arena = arena
        self.table = table
        self.versions = versions
        self.epochs = epochs
        self.log_threshold = log_threshold
        self.underflow_bytes = int(NODE_SIZE * underflow_fraction)
        self.backoff_after = backoff_after
        self.oom_retries = oom_retries
        self.metrics = WriteMetrics()
        self.hooks: dict[str, Callable[..., None]] = {}

    # public operations

    def put(self, key: bytes, value: bytes) -> WriteResult:
        check_key(key)
        check_value(value)
        return self._run(WriteOp.PUT, key, value)

    def update(self, key: bytes, value: bytes) -> WriteResult:
        check_key(key)
        check_value(value)
        return self._run(WriteOp.UPDATE, key, value)

    def delete(self, key: bytes) -> WriteResult:
        check_key(key)
        return self._run(WriteOp.DELETE, key, None)

    # driver

    def _hook(self, name: str, **ctx) -> None:
        fn = self.hooks.get(name)
        if fn is not None:
            fn(**ctx)

    def _run(self, op: WriteOp, key: bytes, value: bytes | None) -> WriteResult:
        failures = 0
        oom = 0
        self.epochs.begin_op()
        try:
            while True:
                try:
                    return self._attempt(op, key, value)
                except Restart:
                    failures += 1
                    self.metrics.restarts += 1
                    if failures > self.backoff_after:
                        time.sleep(min(1e-3, 1e-6 * (1 << min(failures - self.backoff_after, 10))))
                    else:
                        time.sleep(0)
                except AllocationFailed:
                    oom += 1
                    self.metrics.oom_retries += 1
                    self.epochs.end_op()
                    reclaimed = self.epochs.sweep()
                    self.epochs.begin_op()
                    if oom > self.oom_retries or (not reclaimed and not self.epochs.pending):
                        raise OutOfMemory("node arena exhausted") from None
        finally:
            self.epochs.end_op()

    def _release(self, version: int) -> None:
        self.versions.release(version, self.table.publish_read_version)

    # traversal and node views

    def _interior(self, addr: int, buf) -> tuple[list[bytes], list[int]]:
        def build():
            header = read_header(buf)
            items = read_sorted(buf, header)
            return [it.key for it in items], [header.leftmost_child] + [it.payload for it in items]
        return self.arena.cached(addr, "interior", build)

    def _entries(self, addr: int) -> list:
        keys, children = self._interior(addr, self.arena.buffer(addr))
        return [(None, children[0])] + list(zip(keys, children[1:]))

    def _sorted(self, addr: int, buf, header: Header):
        def build():
            items = read_sorted(buf, header)
            return [it.key for it in items], items
        return self.arena.cached(addr, "sorted", build)

    def descend(self, key: bytes) -> list[PathNode]:
        lid, _ = self.table.root
        path = []
        index = 0
        while True:
            addr = self.table.resolve(lid)
            buf = self.arena.buffer(addr)
            word = load_word(buf)
            header = read_header(buf)
            path.append(PathNode(lid, addr, word, header, index))
            if header.is_leaf:
                return path
            keys, children = self._interior(addr, buf)
            index = bisect.bisect_right(keys, key)
            lid = children[index]

    def _leaf_contents(self, addr: int):
        buf = self.arena.buffer(addr)
        header = read_header(buf)
        keys, items = self._sorted(addr, buf, header)
        entries = read_log(buf, header.log_boundary, header.bytes_used)
        return buf, header, keys, items, entries

    @staticmethod
    def _latest(keys, items, entries) -> list[tuple[bytes, bytes]]:
        if not entries:
            return [(it.key, it.payload) for it in items]
        state = {it.key: it.payload for it in items}
        for e in entries:
            if e.kind == EntryKind.DELETE:
                state.pop(e.key, None)
            else:
                state[e.key] = e.value
        return sorted(state.items())

    @staticmethod
    def _key_state(key: bytes, keys, items, entries) -> tuple[bool, int]:
        """(live, offset of the newest item or log entry holding ``key``)."""
        newest = None
        for e in entries:
            if e.key == key:
                newest = e
        if newest is not None:
            return newest.kind != EntryKind.DELETE, newest.offset
        i = bisect.bisect_left(keys, key)
        if i < len(keys) and keys[i] == key:
            return True, items[i].offset
        return False, 0

    @staticmethod
    def _live_count(keys, entries) -> int:
        live = len(keys)
        final: dict[bytes, bool] = {}
        for e in entries:
            final[e.key] = e.kind != EntryKind.DELETE
        for k, present in final.items():
            i = bisect.bisect_left(keys, k)
            in_sorted = i < len(keys) and keys[i] == k
            live += int(present) - int(in_sorted)
        return live

    # one optimistic attempt

    def _attempt(self, op: WriteOp, key: bytes, value: bytes | None) -> WriteResult:
        path = self.descend(key)
        leaf = path[-1]
        locks = _Locks(self.arena)
        version = None
        try:
            if not locks.take(leaf.addr, leaf.word):
                raise Restart
            buf, header, keys, items, entries = self._leaf_contents(leaf.addr)
            live, ref = self._key_state(key, keys, items, entries)
            if op == WriteOp.PUT:
                kind = EntryKind.UPDATE if live else EntryKind.INSERT
                result = WriteResult.UPDATED if live else WriteResult.INSERTED
            elif not live:
                seen = self.versions.write_version
                locks.release_all()
                self.versions.wait_visible(seen)
                return WriteResult.NOT_FOUND
            elif op == WriteOp.UPDATE:
                kind, result = EntryKind.UPDATE, WriteResult.UPDATED
            else:
                kind, result = EntryKind.DELETE, WriteResult.DELETED
                value = None
            if kind == EntryKind.INSERT:
                i = bisect.bisect_right(keys, key)
                ref = items[i].offset if i < len(items) else header.log_boundary
            size = log_entry_size(key, value)
            empties = (kind == EntryKind.DELETE and len(path) > 1
                       and self._live_count(keys, entries) == 1)
            if (header.log_bytes + size <= self.log_threshold
                    and len(entries) < MAX_LOG_ENTRIES
                    and header.bytes_used + size <= NODE_SIZE and not empties):
                version = self.versions.acquire_write_version()
                try:
                    append_log_entry(buf, kind, key, value, ref, version, entries, header)
                    locks.forget(leaf.addr)
                    self.metrics.fast_path += 1
                    self._hook("fast_path.appended", key=key, version=version)
                    self._release(version)
                    version = None
                    return result
                except ForceMerge:
                    pass
            content = self._latest(keys, items, entries)
            i = bisect.bisect_left(content, (key,))
            if i < len(content) and content[i][0] == key:
                if kind == EntryKind.DELETE:
                    del content[i]
                else:
                    content[i] = (key, value)
            else:
                content.insert(i, (key, value))
            plan = self._plan(path, locks, content, header)
            owned, version = version, None
            self._execute(plan, locks, owned)
            return result
        finally:
            self.metrics.lock_attempts += locks.attempts
            self.metrics.lock_failures += locks.failures
            if locks.held:
                locks.release_all()
            if version is not None:
                self._release(version)

    # restructuring

    def _lock_path(self, locks: _Locks, node: PathNode) -> None:
        if not locks.take(node.addr, node.word):
            raise Restart

    def _lock_lid(self, locks: _Locks, lid: int) -> int:
        addr = self.table.resolve(lid)
        if locks.take_current(addr) is None:
            raise Restart
        return addr

    def _plan(self, path: list[PathNode], locks: _Locks, content: list,
              header: Header) -> _Plan:
        plan = _Plan()
        leaf = path[-1]
        _, height = self.table.root
        nbytes = _leaf_bytes(content)
        fits = nbytes <= NODE_SIZE
        under = nbytes < self.underflow_bytes
        mvcc = self.versions.mvcc

        def remap(node: PathNode, new: _NewNode) -> _Plan:
            new.lid = node.lid
            plan.kind, plan.target, plan.target_lid = "remap", new, node.lid
            plan.old_buffers.append(node.addr)
            return plan

        def retire(node_lid: int, addr: int) -> None:
            plan.old_buffers.append(addr)
            plan.old_lids.append(node_lid)

        def fresh(new: _NewNode) -> _NewNode:
            plan.fresh.append(new)
            return new

        if fits and (not under or len(path) == 1):
            self.metrics.merges += 1
            return remap(leaf, _NewNode(True, 0, content, leaf.addr if mvcc else 0,
                                        left=header.left_sibling, right=header.right_sibling))
        if len(path) == 1:
            left_items, right_items = split_leaf_items(content)
            old = leaf.addr if mvcc else 0
            nl = fresh(_NewNode(True, 0, left_items, old))
            nr = fresh(_NewNode(True, 0, right_items, old))
            retire(leaf.lid, leaf.addr)
            plan.leaves = [nl, nr]
            plan.first_old_leaf = plan.last_old_leaf = leaf.lid
            plan.left_neighbor, plan.right_neighbor = header.left_sibling, header.right_sibling
            root = fresh(_NewNode(False, 1, [(None, nl), (right_items[0][0], nr)]))
            plan.kind, plan.target, plan.height = "grow", root, height + 1
            self.metrics.splits += 1
            self.metrics.root_grows += 1
            return plan

        parent = path[-2]
        self._lock_path(locks, parent)
        entries = self._entries(parent.addr)
        i = leaf.index
        if not fits:
            left_items, right_items = split_leaf_items(content)
            old = leaf.addr if mvcc else 0
            nl = fresh(_NewNode(True, 0, left_items, old))
            nr = fresh(_NewNode(True, 0, right_items, old))
            retire(leaf.lid, leaf.addr)
            lo, hi, replacement = i, i + 1, [(entries[i][0], nl), (right_items[0][0], nr)]
            plan.leaves = [nl, nr]
            plan.first_old_leaf = plan.last_old_leaf = leaf.lid
            plan.left_neighbor, plan.right_neighbor = header.left_sibling, header.right_sibling
            self.metrics.splits += 1
        elif len(entries) == 1:
            self.metrics.merges += 1
            return remap(leaf, _NewNode(True, 0, content, leaf.addr if mvcc else 0,
                                        left=header.left_sibling, right=header.right_sibling))
        else:
            j = i + 1 if i + 1 < len(entries) else i - 1
            sib_lid = entries[j][1]
            sib_addr = self._lock_lid(locks, sib_lid)
            _, sib_header, skeys, sitems, sentries = self._leaf_contents(sib_addr)
            sib_content = self._latest(skeys, sitems, sentries)
            if i < j:
                lo = i
                left, right = (leaf.lid, leaf.addr, header, content), \
                    (sib_lid, sib_addr, sib_header, sib_content)
            else:
                lo = j
                left, right = (sib_lid, sib_addr, sib_header, sib_content), \
                    (leaf.lid, leaf.addr, header, content)
            hi = lo + 2
            combined = left[3] + right[3]
            if _leaf_bytes(combined) <= NODE_SIZE:
                merged = fresh(_NewNode(True, 0, combined, left[1] if mvcc else 0))
                replacement = [(entries[lo][0], merged)]
                plan.leaves = [merged]
                self.metrics.node_merges += 1
            else:
                a_items, b_items = split_leaf_items(combined)
                na = fresh(_NewNode(True, 0, a_items, left[1] if mvcc else 0))
                nb = fresh(_NewNode(True, 0, b_items, right[1] if mvcc else 0))
                replacement = [(entries[lo][0], na), (b_items[0][0], nb)]
                plan.leaves = [na, nb]
                self.metrics.borrows += 1
            retire(left[0], left[1])
            retire(right[0], right[1])
            plan.first_old_leaf, plan.last_old_leaf = left[0], right[0]
            plan.left_neighbor = left[2].left_sibling
            plan.right_neighbor = right[2].right_sibling
        new_entries = entries[:lo] + replacement + entries[hi:]
        return self._climb(plan, path, locks, len(path) - 2, new_entries, height, retire,
                           fresh, remap)

    def _climb(self, plan, path, locks, d, new_entries, height, retire, fresh, remap) -> _Plan:
        mvcc = self.versions.mvcc
        while True:
            node = path[d]
            level = node.header.level
            nbytes = _interior_bytes(new_entries)
            fits = nbytes <= NODE_SIZE
            under = nbytes < self.underflow_bytes
            if d == 0:
                if not fits:
                    a, sep, b = split_entries(new_entries)
                    na = fresh(_NewNode(False, level, a))
                    nb = fresh(_NewNode(False, level, b))
                    root = fresh(_NewNode(False, level + 1, [(None, na), (sep, nb)]))
                    retire(node.lid, node.addr)
                    plan.kind, plan.target, plan.height = "grow", root, height + 1
                    self.metrics.interior_splits += 1
                    self.metrics.root_grows += 1
                elif len(new_entries) == 1:
                    retire(node.lid, node.addr)
                    plan.kind, plan.root_child, plan.height = "shrink", new_entries[0][1], height - 1
                    self.metrics.root_shrinks += 1
                else:
                    remap(node, _NewNode(False, level, new_entries, node.addr if mvcc else 0))
                return plan
            if fits and not under:
                return remap(node, _NewNode(False, level, new_entries, node.addr if mvcc else 0))
            parent = path[d - 1]
            self._lock_path(locks, parent)
            entries = self._entries(parent.addr)
            i = node.index
            if not fits:
                a, sep, b = split_entries(new_entries)
                na = fresh(_NewNode(False, level, a))
                nb = fresh(_NewNode(False, level, b))
                retire(node.lid, node.addr)
                lo, hi, replacement = i, i + 1, [(entries[i][0], na), (sep, nb)]
                self.metrics.interior_splits += 1
            elif len(entries) == 1:
                return remap(node, _NewNode(False, level, new_entries, node.addr if mvcc else 0))
            else:
                j = i + 1 if i + 1 < len(entries) else i - 1
                sib_lid = entries[j][1]
                sib_addr = self._lock_lid(locks, sib_lid)
                sib_entries = self._entries(sib_addr)
                if i < j:
                    lo, left, right, sep = i, new_entries, sib_entries, entries[j][0]
                    olds = ((node.lid, node.addr), (sib_lid, sib_addr))
                else:
                    lo, left, right, sep = j, sib_entries, new_entries, entries[i][0]
                    olds = ((sib_lid, sib_addr), (node.lid, node.addr))
                hi = lo + 2
                combined = left + [(sep, right[0][1])] + right[1:]
                if _interior_bytes(combined) <= NODE_SIZE:
                    replacement = [(entries[lo][0], fresh(_NewNode(False, level, combined)))]
                    self.metrics.node_merges += 1
                else:
                    a, sep2, b = split_entries(combined)
                    replacement = [(entries[lo][0], fresh(_NewNode(False, level, a))),
                                   (sep2, fresh(_NewNode(False, level, b)))]
                    self.metrics.borrows += 1
                for old_lid, old_addr in olds:
                    retire(old_lid, old_addr)
            new_entries = entries[:lo] + replacement + entries[hi:]
            d -= 1

    def _execute(self, plan: _Plan, locks: _Locks, version: int | None) -> None:
        try:
            version = self._swap(plan, locks, version)
        finally:
            if version is not None:
                self._release(version)
        self.epochs.retire(ReclaimItem(plan.old_buffers, plan.old_lids))

    def _swap(self, plan: _Plan, locks: _Locks, version: int | None) -> int:
        """Lock neighbours, build the new buffers and publish them; returns the version."""
        arena, table = self.arena, self.table
        neighbors = []
        if plan.leaves:
            if plan.left_neighbor:
                addr = self._lock_lid(locks, plan.left_neighbor)
                if read_header(arena.buffer(addr)).right_sibling != plan.first_old_leaf:
                    raise Restart
                neighbors.append((addr, "right", plan.leaves[0]))
            if plan.right_neighbor:
                addr = self._lock_lid(locks, plan.right_neighbor)
                if read_header(arena.buffer(addr)).left_sibling != plan.last_old_leaf:
                    raise Restart
                neighbors.append((addr, "left", plan.leaves[-1]))

        buffers = list(plan.fresh) + ([plan.target] if plan.kind == "remap" else [])
        try:
            for node in buffers:
                node.addr = arena.allocate()
            for node in plan.fresh:
                node.lid = table.allocate_lid()
        except Exception:
            for node in buffers:
                if node.addr:
                    arena.free(node.addr)
                    node.addr = 0
            raise

        if version is None:
            version = self.versions.acquire_write_version()
        self._encode(plan, buffers, version)
        table.map_new((n.lid, n.addr) for n in plan.fresh)
        self._hook("before_swap", plan=plan, version=version)
        if plan.kind == "remap":
            table.update_mapping(plan.target_lid, plan.target.addr)
        elif plan.kind == "grow":
            table.set_root(plan.target.lid, plan.height, version)
        else:
            child = plan.root_child
            table.set_root(child.lid if isinstance(child, _NewNode) else child,
                           plan.height, version)
        self._hook("after_swap", plan=plan, version=version)
        for addr, side, new in neighbors:
            if side == "right":
                write_links(arena.buffer(addr), link_b=new.lid)
            else:
                write_links(arena.buffer(addr), link_a=new.lid)
            locks.publish(addr)
        for addr in plan.old_buffers:
            locks.retire(addr)
        return version

    def _encode(self, plan: _Plan, buffers: list[_NewNode], version: int) -> None:
        leaves = plan.leaves
        if leaves:
            lids = [plan.left_neighbor] + [n.lid for n in leaves] + [plan.right_neighbor]
            for k, node in enumerate(leaves):
                node.left, node.right = lids[k], lids[k + 2]

        def lid_of(child) -> int:
            return child.lid if isinstance(child, _NewNode) else child

        for node in buffers:
            out = self.arena.buffer(node.addr)
            if node.leaf:
                encode_leaf(node.items, version, node.left, node.right, node.old_link, out=out)
            else:
                items = [(k, lid_of(c)) for k, c in node.items[1:]]
                encode_interior(lid_of(node.items[0][1]), items, node.level, version,
                                node.old_link, out=out)

    # bulk load

    def bulk_load(self, items: Sequence[tuple[bytes, bytes]], leaf_reserve: int | None = None,
                  interior_reserve: int = 512) -> int:
        """Build a packed tree from sorted unique items at version 0; returns the height.

        Leaves keep ``leaf_reserve`` bytes free (log threshold plus one minimum
        segment by default) so the first writes take the fast path.
        """
        if leaf_reserve is None:
            leaf_reserve = self.log_threshold + 256
        for i, (k, v) in enumerate(items):
            check_key(k)
            check_value(v)
            if i and items[i - 1][0] >= k:
                raise ValueError("bulk load needs strictly ascending keys")
        leaf_limit = NODE_SIZE - leaf_reserve
        groups: list[list] = [[]]
        used = SORTED_START
        for item in items:
            size = _leaf_item_size(item)
            if groups[-1] and used + size > leaf_limit:
                groups.append([])
                used = SORTED_START
            groups[-1].append(item)
            used += size
        level_nodes: list[tuple[bytes | None, int]] = []
        lids = [self.table.allocate_lid() for _ in groups]
        mappings = []
        try:
            for n, group in enumerate(groups):
                addr = self.arena.allocate()
                encode_leaf(group, 0, lids[n - 1] if n else 0,
                            lids[n + 1] if n + 1 < len(lids) else 0,
                            out=self.arena.buffer(addr))
                mappings.append((lids[n], addr))
                level_nodes.append((group[0][0] if group else None, lids[n]))
            height = 1
            limit = NODE_SIZE - interior_reserve
            while len(level_nodes) > 1:
                parents = []
                chunk: list = []
                used = SORTED_START
                for first_key, lid in level_nodes:
                    size = BLOB_HEADER + len(first_key) + LID_SIZE
                    if chunk and used + size > limit and len(chunk) >= 2:
                        parents.append(chunk)
                        chunk, used = [], SORTED_START
                    chunk.append((first_key, lid))
                    used += size if len(chunk) > 1 else 0
                parents.append(chunk)
                if len(parents) > 1 and len(parents[-1]) < 2:
                    parents[-2].extend(parents.pop())
                next_level = []
                for chunk in parents:
                    lid = self.table.allocate_lid()
                    addr = self.arena.allocate()
                    encode_interior(chunk[0][1], chunk[1:], height, 0,
                                    out=self.arena.buffer(addr))
                    mappings.append((lid, addr))
                    next_level.append((chunk[0][0], lid))
                level_nodes = next_level
                height += 1
        except (AllocationFailed, CapacityExceeded):
            for _, addr in mappings:
                self.arena.free(addr)
            raise
        old_root = self.table.root[0]
        self.table.map_new(mappings)
        self.table.set_root(level_nodes[0][1], height, 0)
        if old_root:
            self._discard_subtree(old_root)
        return height

    def _discard_subtree(self, lid: int) -> None:
        """Free a detached tree (used when a bulk load replaces the initial empty root)."""
        buffers, lids, stack = [], [], [lid]
        while stack:
            lid = stack.pop()
            addr = self.table.resolve(lid)
            header = read_header(self.arena.buffer(addr))
            if not header.is_leaf:
                stack.extend(self._interior(addr, self.arena.buffer(addr))[1])
            buffers.append(addr)
            lids.append(lid)
        self.epochs.retire(ReclaimItem(buffers, lids))
