"""Ordered key-value store: a B+ tree with shortcut-indexed nodes, logged leaf
writes, snapshot reads and LID indirection for atomic subtree swaps."""

from .errors import (
    CapacityExceeded,
    CorruptNode,
    KeyTooLong,
    LidSpaceExhausted,
    OutOfMemory,
    Overloaded,
    ResultTooLarge,
    StoreError,
    UnknownLid,
    ValueTooLong,
)
from .store import Store, StoreConfig
from .write_engine import WriteResult

__all__ = [
    "CapacityExceeded",
    "CorruptNode",
    "KeyTooLong",
    "LidSpaceExhausted",
    "OutOfMemory",
    "Overloaded",
    "ResultTooLarge",
    "Store",
    "StoreConfig",
    "StoreError",
    "UnknownLid",
    "ValueTooLong",
    "WriteResult",
]
