"""The assembled store: arena, page table, versions, epochs and both engines."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import yaml

from .memory import Arena
from .mvcc import EpochManager, GlobalVersions, ReclaimItem
from .node_format import read_header
from .page_table import PageTable
from .read_engine import ReadEngine
from .write_engine import WriteEngine, WriteResult


@dataclass
class StoreConfig:
    mvcc: bool = True
    log_threshold: int = 512
    threaded_channel: bool = True
    channel_capacity: int = 4096
    arena_capacity: int | None = None
    poison: bool = True
    read_slots: int = 64
    max_scan_items: int = 4096
    max_scan_bytes: int = 1 << 20
    sweep_interval: float = 0.010
    background_sweep: bool = True
    underflow_fraction: float = 0.25
    trace_reads: bool = False
    trace_commands: bool = False

    @classmethod
    def from_mapping(cls, data: dict[str, Any]) -> StoreConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown store settings: {', '.join(sorted(unknown))}")
        return cls(**data)

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)


def load_config_file(path: str | Path) -> dict[str, Any]:
    """Read a YAML or JSON settings file into a plain dict."""
    text = Path(path).read_text()
    if str(path).endswith(".json"):
        return json.loads(text)
    return yaml.safe_load(text) or {}


class Store:
    """Ordered key-value store with snapshot reads and logged leaf writes."""

    def __init__(self, config: StoreConfig | None = None, **overrides):
        cfg = config or StoreConfig()
        if overrides:
            cfg = StoreConfig.from_mapping({**cfg.as_dict(), **overrides})
        self.config = cfg
        self.versions = GlobalVersions(cfg.mvcc)
        self.table = PageTable(self.versions.set_reader_read_version,
                               threaded=cfg.threaded_channel, capacity=cfg.channel_capacity,
                               trace=cfg.trace_commands)
        self.arena = Arena(cfg.arena_capacity, cfg.poison)
        self.reader = ReadEngine(self.arena, self.table, self.versions, cfg.read_slots,
                                 cfg.max_scan_items, cfg.max_scan_bytes, trace=cfg.trace_reads)
        self.epochs = EpochManager(self.reader.window, self._reclaim, cfg.sweep_interval)
        self.writer = WriteEngine(self.arena, self.table, self.versions, self.epochs,
                                  cfg.log_threshold, cfg.underflow_fraction)
        self.writer.bulk_load([])
        if cfg.background_sweep:
            self.epochs.start()

    def _reclaim(self, item: ReclaimItem) -> None:
        for addr in item.buffers:
            self.arena.free(addr)
        self.table.unmap(item.lids)

    # reads
    def get(self, key: bytes) -> bytes | None:
        return self.reader.get(key)

    def scan(self, lower: bytes, upper: bytes) -> list[tuple[bytes, bytes]]:
        return self.reader.scan(lower, upper)

    # writes
    def put(self, key: bytes, value: bytes) -> WriteResult:
        return self.writer.put(key, value)

    def update(self, key: bytes, value: bytes) -> WriteResult:
        return self.writer.update(key, value)

    def delete(self, key: bytes) -> WriteResult:
        return self.writer.delete(key)

    def load(self, items) -> int:
        """Bulk-load sorted unique pairs into an empty store; returns the tree height."""
        lid, height = self.table.root
        header = read_header(self.arena.buffer(self.table.resolve(lid)))
        if height != 1 or header.bytes_used != header.log_boundary or header.log_boundary != 512:
            raise ValueError("bulk load requires an empty store")
        height = self.writer.bulk_load(list(items))
        self.epochs.sweep()
        return height

    @property
    def height(self) -> int:
        return self.table.root[1]

    @property
    def footprint_bytes(self) -> int:
        return self.arena.footprint_bytes

    def quiesce(self) -> None:
        """Apply pending commands and reclaim everything no longer reachable."""
        self.table.channel.drain()
        self.epochs.sweep()

    def stats(self) -> dict[str, Any]:
        channel = self.table.channel
        return {
            "write": self.writer.metrics.as_dict(),
            "read": asdict(self.reader.metrics),
            "versions": {
                "write_version": self.versions.write_version,
                "read_version": self.versions.read_version,
                "reader_read_version": self.versions.reader_read_version,
                "releases": self.versions.releases,
                "release_wait_seconds": self.versions.release_wait_seconds,
            },
            "epochs": {
                "pending": self.epochs.pending,
                "reclaimed_buffers": self.epochs.reclaimed_buffers,
            },
            "page_table": {
                "remaps": self.table.remaps,
                "commands": {k.name: v for k, v in channel.counts.items()},
                "lids": len(self.table.write),
            },
            "memory": {
                "live_buffers": self.arena.live_buffers,
                "footprint_bytes": self.arena.footprint_bytes,
            },
            "height": self.height,
        }

    def close(self) -> None:
        self.epochs.stop()
        self.table.close()

    def __enter__(self) -> Store:
        return self

    def __exit__(self, *exc) -> None:
        self.close()
