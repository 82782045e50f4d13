"""Bit-exact node layout and the search primitives that operate on one node.

Every node is an 8 KiB buffer, little-endian throughout::

    offset  size  field
    0       1     node_type (1 = leaf, 2 = interior)
    1       1     level (0 for leaves)
    2       1     shortcut_count
    3       1     reserved
    4       2     log_boundary (end of sorted block, start of log block)
    6       2     reserved
    8       8     size/lock word: bits 0-15 bytes_used, bits 16-31 zero,
                  bit 32 lock bit, bits 33-63 write sequence number
    16      8     node_version
    24      8     old_version_link (address of the previous buffer, 0 if none)
    32      6     leftmost_child (interior) or left_sibling (leaf)
    38      6     right_sibling (leaf), zero for interior nodes
    44      4     reserved
    48      464   shortcut block: shortcut_count x (u16 key_len, key, u16 offset)
    512     ...   sorted block [512, log_boundary), log block [log_boundary, bytes_used)

Sorted items are ``key blob + payload`` where the payload is a value blob in
leaves and a 6-byte child LID in interior nodes.  A shortcut key is stored
only in the shortcut block; its segment starts directly with its payload.

Log entries::

    u16  kind << 14 | back_ref      kind: 1 insert, 2 update, 3 delete
    u8   order_hint
    u40  version_delta
    key blob, value blob (no value blob for deletes)
"""

from __future__ import annotations

import struct
from collections.abc import Sequence
from dataclasses import dataclass
from enum import IntEnum

from .errors import (
    CapacityExceeded,
    CorruptNode,
    EmptyKey,
    ForceMerge,
    KeyTooLong,
    ValueTooLong,
)

NODE_SIZE = 8192
HEADER_SIZE = 48
SHORTCUT_BYTES = 464
SORTED_START = HEADER_SIZE + SHORTCUT_BYTES  # 512
MIN_SEGMENT = 256
CHUNK_SIZE = 256
LID_SIZE = 6
BLOB_HEADER = 2
MAX_KEY = 460
MAX_VALUE = 469
MAX_LOG_ENTRIES = 256
LOG_ENTRY_HEADER = 8
MAX_VERSION_DELTA = (1 << 40) - 1
MAX_LID = (1 << 48) - 1
SEQ_MASK = (1 << 31) - 1

WORD_OFFSET = 8
_HEADER = struct.Struct("<BBBBHHQQQ")  # through old_version_link (32 bytes)
_U16 = struct.Struct("<H")
_U64 = struct.Struct("<Q")


class NodeType(IntEnum):
    LEAF = 1
    INTERIOR = 2


class EntryKind(IntEnum):
    INSERT = 1
    UPDATE = 2
    DELETE = 3


# Returned by search_segment when an interior search falls below every key.
USE_LEFTMOST = "use-leftmost-child"


def pack_word(bytes_used: int, seq: int, locked: bool) -> int:
    return bytes_used | ((((seq & SEQ_MASK) << 1) | int(locked)) << 32)


def unpack_word(word: int) -> tuple[int, int, bool]:
    lock_word = word >> 32
    return word & 0xFFFF, lock_word >> 1, bool(lock_word & 1)


def load_word(buf) -> int:
    return _U64.unpack_from(buf, WORD_OFFSET)[0]


def store_word(buf, word: int) -> None:
    # One pack_into call: readers observe either the old or the new word.
    _U64.pack_into(buf, WORD_OFFSET, word)


def lid_bytes(lid: int) -> bytes:
    return lid.to_bytes(LID_SIZE, "little")


def lid_from(data, offset: int) -> int:
    return int.from_bytes(data[offset:offset + LID_SIZE], "little")


def check_key(key: bytes) -> None:
    if not key:
        raise EmptyKey("keys must be at least one byte")
    if len(key) > MAX_KEY:
        raise KeyTooLong(f"key of {len(key)} bytes exceeds {MAX_KEY}")


def check_value(value: bytes) -> None:
    if len(value) > MAX_VALUE:
        raise ValueTooLong(f"value of {len(value)} bytes exceeds {MAX_VALUE}")


def blob(data: bytes) -> bytes:
    return _U16.pack(len(data)) + data


@dataclass(frozen=True, slots=True)
class Header:
    node_type: NodeType
    level: int
    shortcut_count: int
    log_boundary: int
    bytes_used: int
    seq: int
    locked: bool
    node_version: int
    old_version_link: int
    link_a: int
    link_b: int

    @property
    def is_leaf(self) -> bool:
        return self.node_type == NodeType.LEAF

    @property
    def leftmost_child(self) -> int:
        return self.link_a

    @property
    def left_sibling(self) -> int:
        return self.link_a

    @property
    def right_sibling(self) -> int:
        return self.link_b

    @property
    def log_bytes(self) -> int:
        return self.bytes_used - self.log_boundary


@dataclass(frozen=True, slots=True)
class Shortcut:
    key: bytes
    offset: int


@dataclass(frozen=True, slots=True)
class SortedItem:
    offset: int  # start of the item; for shortcut items, start of the payload
    key: bytes
    payload: object  # value bytes (leaf) or child LID (interior)
    end: int
    shortcut: bool = False


@dataclass(frozen=True, slots=True)
class LogEntry:
    offset: int
    kind: EntryKind
    back_ref: int
    order_hint: int
    version_delta: int
    key: bytes
    value: bytes | None
    size: int

    def version(self, node_version: int) -> int:
        return node_version + self.version_delta


@dataclass(frozen=True, slots=True)
class Segment:
    offset: int
    length: int
    covering_key: bytes | None
    index: int = 0

    @property
    def end(self) -> int:
        return self.offset + self.length


def read_header(buf) -> Header:
    (node_type, level, count, _r, log_boundary, _r2, word, version,
     old_link) = _HEADER.unpack_from(buf, 0)
    if node_type not in (NodeType.LEAF, NodeType.INTERIOR):
        raise CorruptNode(f"bad node type byte {node_type:#x}")
    bytes_used, seq, locked = unpack_word(word)
    if not (SORTED_START <= log_boundary <= bytes_used <= NODE_SIZE):
        raise CorruptNode(
            f"inconsistent sizes: log_boundary={log_boundary} bytes_used={bytes_used}")
    return Header(NodeType(node_type), level, count, log_boundary, bytes_used, seq,
                  locked, version, old_link, lid_from(buf, 32), lid_from(buf, 38))


def write_links(buf, link_a: int | None = None, link_b: int | None = None) -> None:
    if link_a is not None:
        buf[32:38] = lid_bytes(link_a)
    if link_b is not None:
        buf[38:44] = lid_bytes(link_b)


def payload_size(node_type: NodeType, payload) -> int:
    if node_type == NodeType.LEAF:
        return BLOB_HEADER + len(payload)
    return LID_SIZE


def encode_payload(node_type: NodeType, payload) -> bytes:
    if node_type == NodeType.LEAF:
        return blob(payload)
    return lid_bytes(payload)


def select_shortcuts(key_sizes: Sequence[int], item_sizes: Sequence[int],
                     budget: int = SHORTCUT_BYTES,
                     min_segment: int = MIN_SEGMENT) -> list[int]:
    """Choose which items start a new segment (their keys go to the shortcut block).

    Greedy pass over the items in order.  At each candidate the remaining
    bytes are spread over as many segments as the leftover shortcut budget
    (estimated from the average key size) and the minimum segment size
    allow; the item starts a new segment when that puts the current segment
    boundary closest to the running target.
    """
    n = len(item_sizes)
    total = sum(item_sizes)
    if n < 2 or total < min_segment:
        return []
    entry_cost = sum(key_sizes) / n + BLOB_HEADER + 2
    chosen: list[int] = []
    used = 0
    seg = 0
    copied = 0
    for i in range(n):
        size = item_sizes[i]
        if i and seg >= min_segment:
            cost = key_sizes[i] + BLOB_HEADER + 2
            if used + cost <= budget:
                pending = seg + total - copied
                slots = int((budget - used) // entry_cost)
                parts = max(1, min(slots + 1, pending // min_segment))
                if seg + size / 2 >= pending / parts:
                    chosen.append(i)
                    used += cost
                    seg = 0
                    size -= key_sizes[i] + BLOB_HEADER
        seg += size
        copied += item_sizes[i]
    return chosen


def _plan(node_type: NodeType, items: Sequence[tuple[bytes, object]]):
    key_sizes = [len(k) for k, _ in items]
    item_sizes = [BLOB_HEADER + len(k) + payload_size(node_type, p) for k, p in items]
    chosen = select_shortcuts(key_sizes, item_sizes)
    saved = sum(key_sizes[i] + BLOB_HEADER for i in chosen)
    return chosen, SORTED_START + sum(item_sizes) - saved


def node_bytes(node_type: NodeType, items: Sequence[tuple[bytes, object]]) -> int:
    """Bytes a node holding ``items`` would use (header and shortcut block included)."""
    return _plan(node_type, items)[1]


def fits(node_type: NodeType, items: Sequence[tuple[bytes, object]]) -> bool:
    return node_bytes(node_type, items) <= NODE_SIZE


def encode_node(node_type: NodeType, items: Sequence[tuple[bytes, object]], *,
                level: int = 0, node_version: int = 0, old_version_link: int = 0,
                link_a: int = 0, link_b: int = 0, out=None) -> bytearray:
    """Lay out a node with an empty log block; ``items`` must be sorted and unique."""
    for i, (key, payload) in enumerate(items):
        check_key(key)
        if node_type == NodeType.LEAF:
            check_value(payload)
        if i and items[i - 1][0] >= key:
            raise ValueError("items must be strictly ascending by key")
    chosen, total = _plan(node_type, items)
    if total > NODE_SIZE:
        raise CapacityExceeded(f"{total} bytes do not fit in a {NODE_SIZE}-byte node")
    buf = out if out is not None else bytearray(NODE_SIZE)
    if out is not None:
        buf[:] = bytes(NODE_SIZE)
    shortcut_set = set(chosen)
    pos = SORTED_START
    sc = HEADER_SIZE
    for i, (key, payload) in enumerate(items):
        body = encode_payload(node_type, payload)
        if i in shortcut_set:
            buf[sc:sc + BLOB_HEADER + len(key) + 2] = blob(key) + _U16.pack(pos)
            sc += BLOB_HEADER + len(key) + 2
        else:
            body = blob(key) + body
        buf[pos:pos + len(body)] = body
        pos += len(body)
    assert pos == total
    _HEADER.pack_into(buf, 0, int(node_type), level, len(chosen), 0, total, 0,
                      pack_word(total, 0, False), node_version, old_version_link)
    write_links(buf, link_a, link_b)
    return buf


def encode_leaf(items: Sequence[tuple[bytes, bytes]], node_version: int = 0,
                left_sibling: int = 0, right_sibling: int = 0,
                old_version_link: int = 0, out=None) -> bytearray:
    return encode_node(NodeType.LEAF, items, node_version=node_version,
                       old_version_link=old_version_link, link_a=left_sibling,
                       link_b=right_sibling, out=out)


def encode_interior(leftmost_child: int, items: Sequence[tuple[bytes, int]], level: int,
                    node_version: int = 0, old_version_link: int = 0,
                    out=None) -> bytearray:
    if not leftmost_child:
        raise ValueError("interior nodes need a leftmost child")
    return encode_node(NodeType.INTERIOR, items, level=level, node_version=node_version,
                       old_version_link=old_version_link, link_a=leftmost_child, out=out)


def read_shortcuts(data, count: int) -> list[Shortcut]:
    out = []
    pos = HEADER_SIZE
    for _ in range(count):
        if pos + 2 > SORTED_START:
            raise CorruptNode("shortcut block overruns its region")
        klen = _U16.unpack_from(data, pos)[0]
        end = pos + 2 + klen + 2
        if klen == 0 or end > SORTED_START:
            raise CorruptNode("malformed shortcut entry")
        key = bytes(data[pos + 2:pos + 2 + klen])
        offset = _U16.unpack_from(data, pos + 2 + klen)[0]
        if out and (key <= out[-1].key or offset <= out[-1].offset):
            raise CorruptNode("shortcut entries out of order")
        out.append(Shortcut(key, offset))
        pos = end
    return out


def segments(header: Header, shortcuts: Sequence[Shortcut]) -> list[Segment]:
    """Segment boundaries of the sorted block, first segment included."""
    bounds = [SORTED_START] + [s.offset for s in shortcuts] + [header.log_boundary]
    keys: list[bytes | None] = [None] + [s.key for s in shortcuts]
    out = []
    for i in range(len(keys)):
        lo, hi = bounds[i], bounds[i + 1]
        if hi < lo or lo < SORTED_START or hi > header.log_boundary:
            raise CorruptNode("shortcut offset outside the sorted block")
        out.append(Segment(lo, hi - lo, keys[i], i))
    return out


def search_shortcuts(data, key: bytes) -> Segment:
    """Segment whose covering key is the largest shortcut key <= ``key``.

    ``data`` holds at least the first 512 bytes of the node.  Keys below the
    first shortcut (or a node without shortcuts) map to the first segment.
    """
    header = read_header(data)
    segs = segments(header, read_shortcuts(data, header.shortcut_count))
    chosen = segs[0]
    for seg in segs[1:]:
        if seg.covering_key <= key:
            chosen = seg
        else:
            break
    return chosen


def parse_segment(data, base: int, covering_key: bytes | None,
                  node_type: NodeType) -> list[SortedItem]:
    """Decode the items of one segment; ``data`` is the segment's bytes, ``base`` its node offset."""
    items = []
    pos = 0
    n = len(data)
    leaf = node_type == NodeType.LEAF
    if covering_key is not None:
        if leaf:
            vlen = _U16.unpack_from(data, 0)[0] if n >= 2 else -1
            end = 2 + vlen
            if vlen < 0 or end > n:
                raise CorruptNode("truncated shortcut payload")
            items.append(SortedItem(base, covering_key, bytes(data[2:end]), base + end, True))
        else:
            end = LID_SIZE
            if end > n:
                raise CorruptNode("truncated shortcut payload")
            items.append(SortedItem(base, covering_key, lid_from(data, 0), base + end, True))
        pos = end
    while pos < n:
        if pos + 2 > n:
            raise CorruptNode("truncated key blob")
        klen = _U16.unpack_from(data, pos)[0]
        kend = pos + 2 + klen
        if klen == 0 or kend > n:
            raise CorruptNode("malformed key blob")
        key = bytes(data[pos + 2:kend])
        if leaf:
            if kend + 2 > n:
                raise CorruptNode("truncated value blob")
            vlen = _U16.unpack_from(data, kend)[0]
            end = kend + 2 + vlen
            if end > n:
                raise CorruptNode("truncated value blob")
            payload = bytes(data[kend + 2:end])
        else:
            end = kend + LID_SIZE
            if end > n:
                raise CorruptNode("truncated child lid")
            payload = lid_from(data, kend)
        items.append(SortedItem(base + pos, key, payload, base + end))
        pos = end
    return items


def search_segment(data, base: int, covering_key: bytes | None, key: bytes,
                   node_type: NodeType):
    """Largest item with key <= ``key`` in one segment, compared as memcmp would.

    Returns the SortedItem, ``USE_LEFTMOST`` for an interior segment with no
    candidate and no covering key, or None for a leaf in that situation.
    """
    best = None
    for item in parse_segment(data, base, covering_key, node_type):
        if item.key <= key:
            best = item
        else:
            break
    if best is None and covering_key is None and node_type == NodeType.INTERIOR:
        return USE_LEFTMOST
    return best


def read_sorted(buf, header: Header | None = None) -> list[SortedItem]:
    header = header or read_header(buf)
    items: list[SortedItem] = []
    for seg in segments(header, read_shortcuts(buf, header.shortcut_count)):
        items.extend(parse_segment(memoryview(buf)[seg.offset:seg.end], seg.offset,
                                   seg.covering_key, header.node_type))
    return items


def read_log(data, start: int, end: int, base: int | None = None) -> list[LogEntry]:
    """Decode log entries in node range [start, end).

    ``data`` is either the whole node (``base`` None) or a fetched slice that
    begins at node offset ``base``.
    """
    shift = 0 if base is None else base
    out = []
    pos = start
    while pos < end:
        p = pos - shift
        if pos + LOG_ENTRY_HEADER + 2 > end:
            raise CorruptNode("truncated log entry")
        tag = _U16.unpack_from(data, p)[0]
        kind = tag >> 14
        if kind not in (1, 2, 3):
            raise CorruptNode(f"bad log entry kind {kind}")
        hint = data[p + 2]
        delta = int.from_bytes(data[p + 3:p + 8], "little")
        klen = _U16.unpack_from(data, p + 8)[0]
        kend = p + 10 + klen
        if klen == 0 or kend + shift > end:
            raise CorruptNode("malformed log key")
        key = bytes(data[p + 10:kend])
        value = None
        q = kend
        if kind != EntryKind.DELETE:
            if kend + 2 + shift > end:
                raise CorruptNode("truncated log value")
            vlen = _U16.unpack_from(data, kend)[0]
            q = kend + 2 + vlen
            if q + shift > end:
                raise CorruptNode("truncated log value")
            value = bytes(data[kend + 2:q])
        size = q - p
        out.append(LogEntry(pos, EntryKind(kind), tag & 0x3FFF, hint, delta, key, value, size))
        pos += size
    return out


def log_entry_size(key: bytes, value: bytes | None) -> int:
    return LOG_ENTRY_HEADER + BLOB_HEADER + len(key) + (
        0 if value is None else BLOB_HEADER + len(value))


def encode_log_entry(kind: EntryKind, back_ref: int, order_hint: int, version_delta: int,
                     key: bytes, value: bytes | None) -> bytes:
    head = _U16.pack((int(kind) << 14) | back_ref) + bytes([order_hint]) \
        + version_delta.to_bytes(5, "little")
    return head + blob(key) + (b"" if value is None else blob(value))


def order_hint_for(log: Sequence[LogEntry], key: bytes) -> int:
    """Rank of ``key`` among the current log keys; equal keys sort after older entries."""
    return sum(1 for e in log if e.key <= key)


def append_log_entry(buf, kind: EntryKind, key: bytes, value: bytes | None,
                     back_ref: int, version: int, log: Sequence[LogEntry] | None = None,
                     header: Header | None = None) -> LogEntry:
    """Append one log entry to a locked leaf and publish it with one word store.

    The entry bytes are written past ``bytes_used`` first; the single store
    of (bytes_used, seq + 1, unlocked) then makes it visible and releases
    the lock.
    """
    header = header or read_header(buf)
    if header.node_type != NodeType.LEAF:
        raise CorruptNode("interior nodes have no log block")
    if not header.locked:
        raise RuntimeError("append_log_entry requires the node lock")
    if log is None:
        log = read_log(buf, header.log_boundary, header.bytes_used)
    if len(log) >= MAX_LOG_ENTRIES:
        raise ForceMerge("log block holds the maximum number of entries")
    delta = version - header.node_version
    if delta < 0 or delta > MAX_VERSION_DELTA:
        raise ForceMerge("version delta would wrap")
    hint = order_hint_for(log, key)
    raw = encode_log_entry(kind, back_ref, hint, delta, key, value)
    start = header.bytes_used
    if start + len(raw) > NODE_SIZE:
        raise CapacityExceeded("log entry does not fit in the node")
    buf[start:start + len(raw)] = raw
    store_word(buf, pack_word(start + len(raw), header.seq + 1, False))
    return LogEntry(start, kind, back_ref, hint, delta, key, value, len(raw))


def sort_log(entries: Sequence[LogEntry], read_version: int | None = None,
             node_version: int = 0) -> list[int]:
    """Order log entries by key using only their order hints.

    Entries are replayed in storage order; the entry with hint ``i`` is
    inserted at position ``i`` of the indirection array.  Entries newer than
    ``read_version`` are dropped afterwards.  Returns entry offsets.
    """
    order: list[int] = []
    for idx, entry in enumerate(entries):
        if entry.order_hint > len(order):
            raise CorruptNode(
                f"order hint {entry.order_hint} beyond {len(order)} sorted entries")
        order.insert(entry.order_hint, idx)
    if read_version is not None:
        order = [i for i in order if node_version + entries[i].version_delta <= read_version]
    return [entries[i].offset for i in order]


def decode(buf):
    """Contents of the sorted block: leaf -> [(key, value)], interior -> (leftmost, [(key, lid)])."""
    header = read_header(buf)
    items = [(it.key, it.payload) for it in read_sorted(buf, header)]
    if header.node_type == NodeType.LEAF:
        return items
    return header.leftmost_child, items


def latest_items(buf, header: Header | None = None) -> list[tuple[bytes, bytes]]:
    """Leaf contents with every log entry applied (newest state, versions ignored)."""
    header = header or read_header(buf)
    state = {it.key: it.payload for it in read_sorted(buf, header)}
    for entry in read_log(buf, header.log_boundary, header.bytes_used):
        if entry.kind == EntryKind.DELETE:
            state.pop(entry.key, None)
        else:
            state[entry.key] = entry.value
    return sorted(state.items())


def format_node(buf, lid: int | None = None, addr: int | None = None) -> str:
    """Structured text rendering used by the node-dump command."""
    header = read_header(buf)
    lines = []
    ident = []
    if lid is not None:
        ident.append(f"lid={lid}")
    if addr is not None:
        ident.append(f"addr={addr:#x}")
    lines.append(f"node {' '.join(ident)}".rstrip())
    lines.append(f"  type={header.node_type.name.lower()} level={header.level}")
    lines.append(f"  bytes_used={header.bytes_used} log_boundary={header.log_boundary}")
    lines.append(f"  seq={header.seq} locked={int(header.locked)}")
    lines.append(f"  node_version={header.node_version} "
                 f"old_version_link={header.old_version_link:#x}")
    if header.is_leaf:
        lines.append(f"  left_sibling={header.left_sibling} right_sibling={header.right_sibling}")
    else:
        lines.append(f"  leftmost_child={header.leftmost_child}")
    shortcuts = read_shortcuts(buf, header.shortcut_count)
    lines.append(f"  shortcuts ({len(shortcuts)}):")
    for sc in shortcuts:
        lines.append(f"    {sc.key.hex()} -> {sc.offset}")
    items = read_sorted(buf, header)
    lines.append(f"  sorted ({len(items)}):")
    for it in items:
        payload = it.payload.hex() if isinstance(it.payload, bytes) else f"lid:{it.payload}"
        mark = "*" if it.shortcut else " "
        lines.append(f"   {mark}@{it.offset} {it.key.hex()} = {payload}")
    if header.is_leaf:
        log = read_log(buf, header.log_boundary, header.bytes_used)
        lines.append(f"  log ({len(log)}):")
        for e in log:
            value = "-" if e.value is None else e.value.hex()
            lines.append(f"    @{e.offset} {e.kind.name.lower()} back_ref={e.back_ref} "
                         f"hint={e.order_hint} v+{e.version_delta} {e.key.hex()} = {value}")
    return "\n".join(lines)
