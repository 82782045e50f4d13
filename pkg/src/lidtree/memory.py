"""Stand-in for pinned host memory: fixed-size node buffers behind stable addresses."""

from __future__ import annotations

import itertools
import threading

from .errors import AllocationFailed, UseAfterReclaim
from .node_format import NODE_SIZE, WORD_OFFSET, load_word, store_word

POISON = 0xDB
BASE_ADDRESS = 0x1_0000_0000
_STRIPES = 64


class Arena:
    """Node buffers addressed by monotonically increasing "physical" addresses.

    Addresses are never reused, so a stale address always fails loudly
    instead of aliasing a newer node.  Freed buffers are overwritten with a
    poison byte so that readers still holding the object notice.
    """

    def __init__(self, capacity: int | None = None, poison: bool = True,
                 node_size: int = NODE_SIZE):
        self.capacity = capacity
        self.poison = poison
        self.node_size = node_size
        self._buffers: dict[int, bytearray] = {}
        self._addresses = itertools.count()
        self._cas_locks = [threading.Lock() for _ in range(_STRIPES)]
        self._alloc_lock = threading.Lock()
        self.parse_cache: dict[int, dict] = {}
        self.allocated = 0
        self.freed = 0

    def allocate(self) -> int:
        with self._alloc_lock:
            if self.capacity is not None and len(self._buffers) >= self.capacity:
                raise AllocationFailed(f"arena full ({self.capacity} buffers)")
            addr = BASE_ADDRESS + next(self._addresses) * self.node_size
            self._buffers[addr] = bytearray(self.node_size)
            self.allocated += 1
            return addr

    def buffer(self, addr: int) -> bytearray:
        try:
            return self._buffers[addr]
        except KeyError:
            raise UseAfterReclaim(f"address {addr:#x} is not a live buffer") from None

    def read(self, addr: int, offset: int, length: int) -> bytes:
        buf = self.buffer(addr)
        return bytes(buf[offset:offset + length])

    def cached(self, addr: int, key, build):
        """Memoize a decode of an immutable region of the buffer at ``addr``."""
        per = self.parse_cache.get(addr)
        if per is None:
            per = self.parse_cache.setdefault(addr, {})
        try:
            return per[key]
        except KeyError:
            value = per[key] = build()
            if addr not in self._buffers:
                self.parse_cache.pop(addr, None)
            return value

    def is_live(self, addr: int) -> bool:
        return addr in self._buffers

    def free(self, addr: int) -> None:
        with self._alloc_lock:
            buf = self._buffers.pop(addr)
            self.freed += 1
        if self.poison:
            buf[:] = bytes([POISON]) * len(buf)
        self.parse_cache.pop(addr, None)

    def compare_and_swap_word(self, addr: int, expected: int, new: int) -> bool:
        buf = self.buffer(addr)
        with self._cas_locks[(addr // self.node_size) % _STRIPES]:
            if load_word(buf) != expected:
                return False
            store_word(buf, new)
            return True

    def store_word(self, addr: int, word: int) -> None:
        buf = self.buffer(addr)
        with self._cas_locks[(addr // self.node_size) % _STRIPES]:
            store_word(buf, word)

    @property
    def live_buffers(self) -> int:
        return len(self._buffers)

    @property
    def footprint_bytes(self) -> int:
        return len(self._buffers) * self.node_size

    def addresses(self) -> list[int]:
        return list(self._buffers)


__all__ = ["Arena", "POISON", "BASE_ADDRESS", "WORD_OFFSET"]
