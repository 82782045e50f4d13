"""Global versions, ordered release of writes, and epoch-based buffer reclamation."""

from __future__ import annotations

import logging
import threading
import time
from collections.abc import Callable
from dataclasses import dataclass, field

log = logging.getLogger(__name__)


class GlobalVersions:
    """The global write version, the global read version and the read engine's copy.

    With ``mvcc=False`` every version is zero and release is a no-op.
    """

    def __init__(self, mvcc: bool = True):
        self.mvcc = mvcc
        self.write_version = 0
        self.read_version = 0
        self.reader_read_version = 0
        self._lock = threading.Lock()
        self._release_cond = threading.Condition()
        self._visible_cond = threading.Condition()
        self.releases = 0
        self.release_wait_seconds = 0.0

    def acquire_write_version(self) -> int:
        if not self.mvcc:
            return 0
        with self._lock:
            self.write_version += 1
            return self.write_version

    def release(self, version: int, publish: Callable[[int], object]) -> None:
        """Make ``version`` visible once every smaller version has been released.

        ``publish`` forwards the new read version to the read engine (it is
        called in version order); the call returns only after the read
        engine's copy covers ``version``.
        """
        if not self.mvcc:
            return
        start = time.perf_counter()
        with self._release_cond:
            while self.read_version != version - 1:
                self._release_cond.wait()
            self.read_version = version
            publish(version)
            self._release_cond.notify_all()
        self.wait_visible(version)
        with self._lock:
            self.releases += 1
            self.release_wait_seconds += time.perf_counter() - start

    def set_reader_read_version(self, version: int) -> None:
        with self._visible_cond:
            if version > self.reader_read_version:
                self.reader_read_version = version
            self._visible_cond.notify_all()

    def wait_visible(self, version: int) -> None:
        if not self.mvcc:
            return
        with self._visible_cond:
            while self.reader_read_version < version:
                self._visible_cond.wait()

    def check_invariant(self) -> bool:
        return self.reader_read_version <= self.read_version <= self.write_version


@dataclass
class ThreadSlot:
    """Operation sequence number exposed by one writer thread."""

    name: str
    seq: int = 0
    active: bool = False


@dataclass(frozen=True)
class VectorTimestamp:
    writers: tuple[tuple[ThreadSlot, int, bool], ...]
    reader_newest: int

    def entries(self) -> dict[str, int]:
        return {slot.name: seq for slot, seq, _ in self.writers}


@dataclass
class ReclaimItem:
    buffers: list[int]
    lids: list[int] = field(default_factory=list)
    stamp: VectorTimestamp | None = None


class EpochManager:
    """Deferred reclamation of superseded node buffers and retired LIDs.

    ``reader_window`` returns ``(s_old, s_new, inflight)`` from the read
    engine; ``reclaim`` frees one item's buffers and unmaps its LIDs.
    """

    def __init__(self, reader_window: Callable[[], tuple[int, int, int]],
                 reclaim: Callable[[ReclaimItem], None], interval: float = 0.010):
        self.reader_window = reader_window
        self.reclaim = reclaim
        self.interval = interval
        self._slots: list[ThreadSlot] = []
        self._local = threading.local()
        self._items: list[ReclaimItem] = []
        self._lock = threading.Lock()
        self._sweep_lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.reclaimed_buffers = 0
        self.reclaimed_items = 0

    def slot(self) -> ThreadSlot:
        slot = getattr(self._local, "slot", None)
        if slot is None:
            slot = ThreadSlot(threading.current_thread().name)
            with self._lock:
                self._slots.append(slot)
            self._local.slot = slot
        return slot

    def begin_op(self) -> ThreadSlot:
        slot = self.slot()
        slot.seq += 1
        slot.active = True
        return slot

    def end_op(self) -> None:
        self.slot().active = False

    def stamp(self) -> VectorTimestamp:
        with self._lock:
            writers = tuple((s, s.seq, s.active) for s in self._slots)
        _, s_new, _ = self.reader_window()
        return VectorTimestamp(writers, s_new)

    def retire(self, item: ReclaimItem) -> ReclaimItem:
        item.stamp = self.stamp()
        with self._lock:
            self._items.append(item)
        return item

    def _dominated(self, stamp: VectorTimestamp, window: tuple[int, int, int]) -> bool:
        for slot, seq, active in stamp.writers:
            if active and slot.active and slot.seq == seq:
                return False
        s_old, _, inflight = window
        return inflight == 0 or stamp.reader_newest < s_old

    def sweep(self) -> int:
        with self._sweep_lock:
            window = self.reader_window()
            with self._lock:
                ready, keep = [], []
                for it in self._items:
                    (ready if self._dominated(it.stamp, window) else keep).append(it)
                if not ready:
                    return 0
                self._items = keep
            for item in ready:
                self.reclaim(item)
                self.reclaimed_buffers += len(item.buffers)
                self.reclaimed_items += 1
            return len(ready)

    @property
    def pending(self) -> int:
        return len(self._items)

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, name="epoch-sweeper", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        while not self._stop.wait(self.interval):
            try:
                self.sweep()
            except Exception:  # keep sweeping; a bad item is logged, not fatal
                log.exception("sweep failed")

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None
