"""Structural audit of a quiescent tree."""

from __future__ import annotations

from dataclasses import dataclass, field

from .node_format import latest_items, read_header, read_log, read_sorted, sort_log


class AuditError(AssertionError):
    pass


@dataclass
class AuditReport:
    height: int = 0
    leaves: int = 0
    interior: int = 0
    items: int = 0
    problems: list[str] = field(default_factory=list)
    contents: list[tuple[bytes, bytes]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems


def audit(store, check_tables: bool = True) -> AuditReport:
    """Check B+ tree invariants, sibling links and page-table agreement.

    Must run while no writer is active.
    """
    table, arena = store.table, store.arena
    report = AuditReport()
    problems = report.problems
    root, height = table.root
    report.height = height
    in_order: list[int] = []
    leaf_headers = {}

    def walk(lid: int, depth: int, low: bytes | None, high: bytes | None) -> None:
        addr = table.write.get(lid)
        if not addr:
            problems.append(f"lid {lid} unmapped")
            return
        if not arena.is_live(addr):
            problems.append(f"lid {lid} maps to reclaimed buffer {addr:#x}")
            return
        buf = arena.buffer(addr)
        header = read_header(buf)
        if header.locked:
            problems.append(f"lid {lid} left locked")
        expected_level = height - 1 - depth
        if header.level != expected_level:
            problems.append(f"lid {lid} level {header.level}, expected {expected_level}")
        items = read_sorted(buf, header)
        keys = [it.key for it in items]
        if any(a >= b for a, b in zip(keys, keys[1:])):
            problems.append(f"lid {lid} sorted block out of order")
        if header.is_leaf:
            if depth != height - 1:
                problems.append(f"leaf {lid} at depth {depth}, tree height {height}")
            entries = read_log(buf, header.log_boundary, header.bytes_used)
            order = sort_log(entries)
            by_off = {e.offset: e for e in entries}
            sorted_keys = [by_off[o].key for o in order]
            if sorted_keys != sorted(sorted_keys):
                problems.append(f"leaf {lid} order hints disagree with key order")
            live = latest_items(buf, header)
            for k, _ in live:
                if (low is not None and k < low) or (high is not None and k >= high):
                    problems.append(f"leaf {lid} key {k.hex()} outside [{low!r}, {high!r})")
                    break
            report.leaves += 1
            report.items += len(live)
            report.contents.extend(live)
            in_order.append(lid)
            leaf_headers[lid] = header
            return
        report.interior += 1
        for k in keys:
            if (low is not None and k < low) or (high is not None and k >= high):
                problems.append(f"interior {lid} separator {k.hex()} outside its range")
        children = [header.leftmost_child] + [it.payload for it in items]
        bounds = [low] + keys + [high]
        for i, child in enumerate(children):
            walk(child, depth + 1, bounds[i], bounds[i + 1])

    walk(root, 0, None, None)
    for i, lid in enumerate(in_order):
        header = leaf_headers[lid]
        want_left = in_order[i - 1] if i else 0
        want_right = in_order[i + 1] if i + 1 < len(in_order) else 0
        if header.left_sibling != want_left:
            problems.append(f"leaf {lid} left link {header.left_sibling}, expected {want_left}")
        if header.right_sibling != want_right:
            problems.append(
                f"leaf {lid} right link {header.right_sibling}, expected {want_right}")
    keys = [k for k, _ in report.contents]
    if any(a >= b for a, b in zip(keys, keys[1:])):
        problems.append("leaf contents not globally ordered")
    if check_tables and not table.in_sync():
        problems.append("write-side and read-side page tables differ")
    return report


def assert_valid(store) -> AuditReport:
    report = audit(store)
    if report.problems:
        raise AuditError("; ".join(report.problems[:10]))
    return report
