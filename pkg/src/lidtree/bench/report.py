"""CSV, table and figure output for benchmark and simulator results."""

from __future__ import annotations

import csv
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any

TABLE_COLUMNS = ("workload", "distribution", "read_pct", "threads", "operations",
                 "throughput", "p50_us", "p99_us", "bytes_per_op", "merges", "splits")


def read_csv(path: str | Path) -> list[dict[str, str]]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_csv(rows: Iterable[dict[str, Any]], path: str | Path, append: bool = True) -> Path:
    """Write rows, keeping earlier rows when appending; columns are the union."""
    path = Path(path)
    old = read_csv(path) if append else []
    rows = old + [dict(r) for r in rows]
    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, restval="")
        writer.writeheader()
        writer.writerows(rows)
    return path


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:,.2f}"
    return str(value)


def format_table(rows: Sequence[dict[str, Any]],
                 columns: Sequence[str] | None = None) -> str:
    """Human-readable table with aligned columns."""
    if not rows:
        return "(no rows)"
    if columns is None:
        known = [c for c in TABLE_COLUMNS if any(c in r for r in rows)]
        columns = known if len(known) >= 3 else list(rows[0])
    cells = [[_cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    numeric = [all(_is_number(row[i]) for row in cells) for i in range(len(columns))]

    def line(values: Sequence[str]) -> str:
        return "  ".join(v.rjust(w) if num else v.ljust(w)
                         for v, w, num in zip(values, widths, numeric)).rstrip()

    out = [line(columns), line(["-" * w for w in widths])]
    out.extend(line(row) for row in cells)
    return "\n".join(out)


def _is_number(text: str) -> bool:
    try:
        float(text.replace(",", ""))
        return True
    except ValueError:
        return text == ""


def _float(value: Any) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        return 0.0


def _label(row: dict[str, Any]) -> str:
    if not row.get("workload") and row.get("cache_mb") not in (None, ""):
        label = f"sim {_float(row['cache_mb']):g} MB"
        if str(row.get("balancer")) == "False":
            label += " NoLB"
        if str(row.get("root_cache")) == "False":
            label += " no-root"
        return label
    label = f"{row.get('workload', '?')}/{row.get('distribution', '?')}"
    if row.get("read_pct") not in (None, ""):
        label += f" {_float(row['read_pct']):g}%r"
    if row.get("backend") not in (None, "", "direct"):
        label += f" [{row['backend']}]"
    return label


def render_figures(csv_path: str | Path) -> list[Path]:
    """Render PNG figures next to a results CSV; returns the written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    csv_path = Path(csv_path)
    rows = read_csv(csv_path)
    if not rows:
        return []
    stem = csv_path.with_suffix("")
    written: list[Path] = []
    labels = [_label(r) for r in rows]
    x = range(len(rows))

    if any("throughput" in r for r in rows):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(max(8, 1.2 * len(rows) + 4), 4.5))
        ax1.bar(x, [_float(r.get("throughput")) for r in rows], color="tab:blue")
        ax1.set_ylabel("operations / s")
        ax1.set_title("Throughput")
        width = 0.4
        ax2.bar([i - width / 2 for i in x], [_float(r.get("p50_us")) for r in rows], width,
                label="p50")
        ax2.bar([i + width / 2 for i in x], [_float(r.get("p99_us")) for r in rows], width,
                label="p99")
        ax2.set_ylabel("latency (µs)")
        ax2.set_title("Latency")
        ax2.legend()
        for ax in (ax1, ax2):
            ax.set_xticks(list(x))
            ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
        fig.tight_layout()
        path = stem.parent / f"{stem.name}_throughput.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    channel_cols = [(ch, cat) for ch in ("host", "board")
                    for cat in ("node", "page_table", "metadata")]

    def prefix_of(row: dict[str, Any]) -> str | None:
        return next((p for p in ("sim_", "")
                     if row.get(f"{p}host_read_bytes_by_category_node") not in (None, "")),
                    None)

    if any(prefix_of(r) is not None for r in rows):
        fig, ax = plt.subplots(figsize=(max(7, 1.2 * len(rows) + 3), 4.5))
        bottoms = {ch: [0.0] * len(rows) for ch in ("host", "board")}
        width = 0.4
        colors = {"node": "tab:blue", "page_table": "tab:orange", "metadata": "tab:green"}
        for ch, cat in channel_cols:
            vals = []
            for r in rows:
                prefix = prefix_of(r)
                if prefix is None:
                    vals.append(0.0)
                    continue
                elapsed = _float(r.get(f"{prefix}elapsed")) or 1.0
                total = _float(r.get(f"{prefix}{ch}_read_bytes_by_category_{cat}")) + \
                    _float(r.get(f"{prefix}{ch}_write_bytes_by_category_{cat}"))
                vals.append(total / elapsed / 1e9)
            offset = -width / 2 if ch == "host" else width / 2
            ax.bar([i + offset for i in x], vals, width, bottom=bottoms[ch],
                   color=colors[cat], alpha=1.0 if ch == "host" else 0.55,
                   label=f"{ch} {cat.replace('_', ' ')}")
            bottoms[ch] = [b + v for b, v in zip(bottoms[ch], vals)]
        ax.set_ylabel("GB/s")
        ax.set_title("Channel bandwidth by category (left: host, right: board)")
        ax.set_xticks(list(x))
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
        ax.legend(fontsize=7, ncol=2)
        fig.tight_layout()
        path = stem.parent / f"{stem.name}_channels.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
