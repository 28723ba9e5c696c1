"""Per-peer pending-write caches for early conflict detection.

A cache holds the write keys of transactions the peer has endorsed that
have not yet been committed or rejected. A new proposal whose read keys hit
any of those write keys is rejected before it is endorsed.

Three interchangeable strategies are provided:

* ``MutexLockCache``: one lock around everything, check-and-reserve atomic.
* ``LockFreeCache``: mutations go to an append-only buffer that is folded
  into the main map in batches; probes never take a lock.
* ``SyncMapCache``: a read-mostly snapshot map with a locked dirty overlay,
  promoted once enough lookups miss the snapshot.

All three report the same decision for the same single-threaded operation
sequence. When several writers of a key are live, the reported blocking
transaction is the one reserved earliest, and the reported key is the
smallest conflicting read key.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Union

Clock = Callable[[], float]

DEFAULT_TTL = 30.0
DEFAULT_LOCKFREE_THRESHOLD = 64


class DuplicateReservationError(RuntimeError):
    """A tx id was reserved while already live in the same cache."""


@dataclass(frozen=True)
class CacheEntry:
    tx_id: str
    write_keys: frozenset[str]
    inserted_at: float
    seq: int


@dataclass(frozen=True)
class Reserved:
    pass


@dataclass(frozen=True)
class ConflictDetected:
    conflicting_key: str
    blocking_tx: str


CacheDecision = Union[Reserved, ConflictDetected]
RESERVED = Reserved()


class _Counters:
    FIELDS = ("probes", "conflicts", "reservations", "releases", "evictions")

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._values = dict.fromkeys(self.FIELDS, 0)

    def bump(self, name: str, n: int = 1) -> None:
        with self._lock:
            self._values[name] += n

    def as_dict(self) -> dict[str, int]:
        with self._lock:
            return dict(self._values)


def _pick_conflict(
    read_keys: Iterable[str], writers_of: Callable[[str], Iterable[CacheEntry]]
) -> ConflictDetected | None:
    for key in sorted(read_keys):
        writers = list(writers_of(key))
        if writers:
            first = min(writers, key=lambda e: e.seq)
            return ConflictDetected(key, first.tx_id)
    return None


class PendingWriteCache:
    """Shared bookkeeping; subclasses supply the storage strategy."""

    name = "abstract"

    def __init__(self, clock: Clock = time.monotonic) -> None:
        self.clock = clock
        self.counters = _Counters()
        self._seq_lock = threading.Lock()
        self._next_seq = 0

    def _new_entry(self, tx_id: str, write_keys: Iterable[str]) -> CacheEntry:
        with self._seq_lock:
            seq = self._next_seq
            self._next_seq += 1
        return CacheEntry(tx_id, frozenset(write_keys), self.clock(), seq)

    def check_and_reserve(
        self, tx_id: str, read_keys: Iterable[str], write_keys: Iterable[str]
    ) -> CacheDecision:
        raise NotImplementedError

    def release(self, tx_id: str) -> bool:
        raise NotImplementedError

    def live_entries(self) -> list[CacheEntry]:
        raise NotImplementedError

    def evict_expired(self, ttl: float) -> int:
        if ttl <= 0:
            raise ValueError("ttl must be positive")
        cutoff = self.clock() - ttl
        count = 0
        for entry in self.live_entries():
            if entry.inserted_at < cutoff and self._discard(entry.tx_id):
                count += 1
        if count:
            self.counters.bump("evictions", count)
        return count

    def _discard(self, tx_id: str) -> bool:
        raise NotImplementedError

    def __len__(self) -> int:
        return len(self.live_entries())

    def stats(self) -> dict[str, int]:
        out = self.counters.as_dict()
        out["live"] = len(self)
        return out

    def _record_decision(self, decision: CacheDecision) -> CacheDecision:
        self.counters.bump("probes")
        if isinstance(decision, ConflictDetected):
            self.counters.bump("conflicts")
        else:
            self.counters.bump("reservations")
        return decision


class MutexLockCache(PendingWriteCache):
    name = "mutex"

    def __init__(self, clock: Clock = time.monotonic) -> None:
        super().__init__(clock)
        self._lock = threading.Lock()
        self._entries: dict[str, CacheEntry] = {}
        self._writers: dict[str, dict[str, CacheEntry]] = {}

    def check_and_reserve(self, tx_id, read_keys, write_keys):
        read_keys = set(read_keys)
        with self._lock:
            if tx_id in self._entries:
                raise DuplicateReservationError(tx_id)
            hit = _pick_conflict(
                read_keys, lambda k: self._writers.get(k, {}).values()
            )
            if hit is None:
                entry = self._new_entry(tx_id, write_keys)
                self._entries[tx_id] = entry
                for key in entry.write_keys:
                    self._writers.setdefault(key, {})[tx_id] = entry
        return self._record_decision(hit or RESERVED)

    def _remove_locked(self, tx_id: str) -> bool:
        entry = self._entries.pop(tx_id, None)
        if entry is None:
            return False
        for key in entry.write_keys:
            writers = self._writers[key]
            del writers[tx_id]
            if not writers:
                del self._writers[key]
        return True

    def release(self, tx_id):
        with self._lock:
            removed = self._remove_locked(tx_id)
        if removed:
            self.counters.bump("releases")
        return removed

    def _discard(self, tx_id):
        with self._lock:
            return self._remove_locked(tx_id)

    def live_entries(self):
        with self._lock:
            return list(self._entries.values())


class LockFreeCache(PendingWriteCache):
    """Buffered-mutation cache.

    Reservations and releases are appended to ``_buffer`` (list.append is
    atomic). Once the buffer holds ``threshold`` operations the appending
    thread folds it into the main maps under a short exclusive section.
    The main maps hold immutable values and are only ever rebound, so
    probes read them without locking. Probes take a buffer snapshot *before*
    reading the main maps: an op that is folded in between is then seen in
    one place or the other, never neither.
    """

    name = "lockfree"

    def __init__(
        self,
        clock: Clock = time.monotonic,
        threshold: int = DEFAULT_LOCKFREE_THRESHOLD,
    ) -> None:
        super().__init__(clock)
        if threshold < 1:
            raise ValueError("threshold must be >= 1")
        self.threshold = threshold
        self._buffer: list[tuple[str, CacheEntry]] = []
        self._apply_lock = threading.Lock()
        self._entries: dict[str, CacheEntry] = {}
        self._writers: dict[str, tuple[CacheEntry, ...]] = {}
        self.batches_applied = 0

    def _view(self, pending: list[tuple[str, CacheEntry]]):
        """Effective state of buffered txs: tx_id -> entry (None if released)."""
        overlay: dict[str, CacheEntry | None] = {}
        for op, entry in pending:
            overlay[entry.tx_id] = entry if op == "reserve" else None
        return overlay

    def _is_live(self, tx_id: str, overlay) -> CacheEntry | None:
        if tx_id in overlay:
            return overlay[tx_id]
        return self._entries.get(tx_id)

    def check_and_reserve(self, tx_id, read_keys, write_keys):
        read_keys = set(read_keys)
        pending = self._buffer[:]
        overlay = self._view(pending)
        writers = self._writers
        if self._is_live(tx_id, overlay) is not None:
            raise DuplicateReservationError(tx_id)

        def writers_of(key: str):
            found = [e for e in writers.get(key, ()) if e.tx_id not in overlay]
            found += [
                e for e in overlay.values() if e is not None and key in e.write_keys
            ]
            return found

        hit = _pick_conflict(read_keys, writers_of)
        if hit is None:
            self._append("reserve", self._new_entry(tx_id, write_keys))
        return self._record_decision(hit or RESERVED)

    def _append(self, op: str, entry: CacheEntry) -> None:
        self._buffer.append((op, entry))
        if len(self._buffer) >= self.threshold:
            self.flush()

    def flush(self) -> None:
        with self._apply_lock:
            n = len(self._buffer)
            if n == 0:
                return
            batch = self._buffer[:n]
            entries = dict(self._entries)
            touched: dict[str, list[CacheEntry]] = {}

            def writers(key):
                if key not in touched:
                    touched[key] = list(self._writers.get(key, ()))
                return touched[key]

            for op, entry in batch:
                if op == "reserve":
                    entries[entry.tx_id] = entry
                    for key in entry.write_keys:
                        writers(key).append(entry)
                else:
                    live = entries.pop(entry.tx_id, None)
                    if live is not None:
                        for key in live.write_keys:
                            lst = writers(key)
                            lst[:] = [e for e in lst if e.tx_id != live.tx_id]
            new_writers = dict(self._writers)
            for key, lst in touched.items():
                if lst:
                    new_writers[key] = tuple(lst)
                else:
                    new_writers.pop(key, None)
            # publish maps first, then drop the folded ops from the buffer
            self._writers = new_writers
            self._entries = entries
            del self._buffer[:n]
            self.batches_applied += 1

    def release(self, tx_id):
        removed = self._discard(tx_id)
        if removed:
            self.counters.bump("releases")
        return removed

    def _discard(self, tx_id):
        overlay = self._view(self._buffer[:])
        entry = self._is_live(tx_id, overlay)
        if entry is None:
            return False
        self._append("release", entry)
        return True

    def live_entries(self):
        pending = self._buffer[:]
        overlay = self._view(pending)
        live = {k: v for k, v in self._entries.items() if k not in overlay}
        live.update({k: v for k, v in overlay.items() if v is not None})
        return list(live.values())


class _Cell:
    __slots__ = ("value",)

    def __init__(self, value) -> None:
        self.value = value


_EXPUNGED = object()


class SyncMap:
    """Two-level concurrent map in the style of Go's ``sync.Map``.

    ``_read`` is an immutable (dict, amended) pair swapped atomically; its
    dict maps keys to mutable cells, so updates to keys already in the
    snapshot are visible to lock-free readers. Keys added since the last
    promotion live only in ``_dirty`` (guarded by ``_mu``). A lookup that
    misses the snapshot while ``amended`` is set falls back to the dirty map
    and counts a miss; once misses reach ``promote_after`` (default: the
    dirty map's size) the dirty map becomes the new snapshot.
    """

    def __init__(self, promote_after: int | None = None) -> None:
        self._mu = threading.Lock()
        self._read: tuple[dict, bool] = ({}, False)
        self._dirty: dict | None = None
        self._misses = 0
        self.promote_after = promote_after
        self.promotions = 0

    @staticmethod
    def _live(cell: _Cell | None):
        if cell is None:
            return None
        v = cell.value
        return None if v is None or v is _EXPUNGED else v

    def load(self, key):
        m, amended = self._read
        cell = m.get(key)
        if cell is None and amended:
            with self._mu:
                m, amended = self._read
                cell = m.get(key)
                if cell is None and amended:
                    cell = self._dirty.get(key)
                    self._miss_locked()
        return self._live(cell)

    def _miss_locked(self) -> None:
        self._misses += 1
        limit = self.promote_after if self.promote_after else len(self._dirty)
        if self._misses < limit:
            return
        self._read = (self._dirty, False)
        self._dirty = None
        self._misses = 0
        self.promotions += 1

    def _dirty_locked(self) -> None:
        if self._dirty is not None:
            return
        m, _ = self._read
        self._dirty = {}
        for k, cell in m.items():
            if cell.value is None:
                cell.value = _EXPUNGED
            if cell.value is not _EXPUNGED:
                self._dirty[k] = cell

    def store(self, key, value) -> None:
        m, _ = self._read
        cell = m.get(key)
        if cell is not None and cell.value is not _EXPUNGED:
            # single-writer per key is the caller's job (see SyncMapCache)
            cell.value = value
            return
        with self._mu:
            m, amended = self._read
            cell = m.get(key)
            if cell is not None:
                if cell.value is _EXPUNGED:
                    cell.value = None
                    self._dirty[key] = cell
                cell.value = value
            elif self._dirty is not None and key in self._dirty:
                self._dirty[key].value = value
            else:
                if not amended:
                    self._dirty_locked()
                    self._read = (m, True)
                self._dirty[key] = _Cell(value)

    def delete(self, key) -> None:
        m, amended = self._read
        cell = m.get(key)
        if cell is None and amended:
            with self._mu:
                m, amended = self._read
                cell = m.get(key)
                if cell is None and amended:
                    cell = self._dirty.pop(key, None)
                    self._miss_locked()
        if cell is not None and cell.value is not _EXPUNGED:
            cell.value = None

    def items(self) -> list[tuple]:
        """Snapshot of live items; promotes the dirty map like Go's Range."""
        m, amended = self._read
        if amended:
            with self._mu:
                m, amended = self._read
                if amended:
                    self._read = (self._dirty, False)
                    m = self._dirty
                    self._dirty = None
                    self._misses = 0
                    self.promotions += 1
        out = []
        for k, cell in list(m.items()):
            v = self._live(cell)
            if v is not None:
                out.append((k, v))
        return out


class SyncMapCache(PendingWriteCache):
    """Cache over two SyncMaps: key -> writers, tx_id -> entry.

    Probes are lock-free reads. Mutations are serialized by ``_write_lock``
    so read-modify-write of a key's writer tuple never loses an update;
    check and insert are not one atomic step.
    """

    name = "syncmap"

    def __init__(
        self, clock: Clock = time.monotonic, promote_after: int | None = None
    ) -> None:
        super().__init__(clock)
        self._writers = SyncMap(promote_after)
        self._entries = SyncMap(promote_after)
        self._write_lock = threading.Lock()

    def check_and_reserve(self, tx_id, read_keys, write_keys):
        read_keys = set(read_keys)
        if self._entries.load(tx_id) is not None:
            raise DuplicateReservationError(tx_id)
        hit = _pick_conflict(read_keys, lambda k: self._writers.load(k) or ())
        if hit is None:
            entry = self._new_entry(tx_id, write_keys)
            with self._write_lock:
                if self._entries.load(tx_id) is not None:
                    raise DuplicateReservationError(tx_id)
                self._entries.store(tx_id, entry)
                for key in entry.write_keys:
                    current = self._writers.load(key) or ()
                    self._writers.store(key, current + (entry,))
        return self._record_decision(hit or RESERVED)

    def _discard(self, tx_id):
        with self._write_lock:
            entry = self._entries.load(tx_id)
            if entry is None:
                return False
            for key in entry.write_keys:
                rest = tuple(
                    e for e in (self._writers.load(key) or ()) if e.tx_id != tx_id
                )
                if rest:
                    self._writers.store(key, rest)
                else:
                    self._writers.delete(key)
            self._entries.delete(tx_id)
        return True

    def release(self, tx_id):
        removed = self._discard(tx_id)
        if removed:
            self.counters.bump("releases")
        return removed

    def live_entries(self):
        return [e for _, e in self._entries.items()]


VARIANTS = ("mutex", "lockfree", "syncmap")


def make_cache(
    variant: str,
    clock: Clock = time.monotonic,
    lockfree_threshold: int = DEFAULT_LOCKFREE_THRESHOLD,
    syncmap_promote_after: int | None = None,
) -> PendingWriteCache | None:
    """Build a cache by variant name; ``baseline`` means no cache."""
    if variant == "baseline":
        return None
    if variant == "mutex":
        return MutexLockCache(clock)
    if variant == "lockfree":
        return LockFreeCache(clock, lockfree_threshold)
    if variant == "syncmap":
        return SyncMapCache(clock, syncmap_promote_after)
    raise ValueError(f"unknown cache variant {variant!r}")
