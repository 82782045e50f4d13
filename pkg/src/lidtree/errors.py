"""Exception hierarchy shared by every layer of the store."""

from __future__ import annotations


class StoreError(Exception):
    """Base class for all store errors."""


class KeyTooLong(StoreError, ValueError):
    pass


class ValueTooLong(StoreError, ValueError):
    pass


class EmptyKey(StoreError, ValueError):
    pass


class CapacityExceeded(StoreError):
    """The requested content does not fit in a node (caller must merge or split)."""


class ForceMerge(CapacityExceeded):
    """A log append would wrap the version delta or overflow the order-hint range."""


class CorruptNode(StoreError):
    """A node buffer failed structural validation."""


class UseAfterReclaim(CorruptNode):
    """A buffer was accessed after the epoch manager reclaimed it."""


class UnknownLid(StoreError, KeyError):
    pass


class LidSpaceExhausted(StoreError):
    pass


class OutOfMemory(StoreError, MemoryError):
    pass


class AllocationFailed(OutOfMemory):
    """Arena is full; the caller may reclaim and retry."""


class Overloaded(StoreError):
    """All inflight request slots of the read engine are busy."""


class ResultTooLarge(StoreError):
    pass


class ProtocolError(StoreError, ValueError):
    """A wire frame could not be decoded."""
