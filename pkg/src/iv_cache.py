"""Write-back LRU cache of aggregated-IV metadata sectors."""

import threading
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from .config import IV_CACHE_CAPACITY
from .logger import setup_logger

logger = setup_logger(__name__)

Loader = Callable[[int], np.ndarray]
WriteBack = Callable[[int, np.ndarray], None]


@dataclass(eq=False)
class IvCacheEntry:
    """
    One cached metadata sector.

    `lock` guards the IVs and flags; `io_lock` orders write-backs of the line
    and is never taken while `lock` is held.
    """

    data_set: int
    iv_array: Optional[np.ndarray] = None
    dirty: bool = False
    flushing: bool = False
    evicted: bool = False
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    io_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


class IvCache:
    """
    LRU cache mapping data-set index to its IV array.

    The OrderedDict is the hash map plus doubly-linked list; the structure
    lock is held only for lookups and list surgery, entry locks protect the
    IVs. Write-back I/O runs under neither: a line is copied under its lock
    and written afterwards. An evicted line stays visible as dirty until its
    write-back lands, and a reload of it waits for that. A present entry is
    authoritative over the on-disk metadata sector.
    """

    def __init__(
        self,
        loader: Loader,
        write_back: WriteBack,
        capacity: int = IV_CACHE_CAPACITY,
        on_flushed: Optional[WriteBack] = None
    ):
        """
        Args:
            loader: Reads and verifies a data set's metadata sector
            write_back: Persists a data set's IV array to its metadata sector
            capacity: Maximum number of cached lines
            on_flushed: Called with (data_set, flushed IVs) after every write-back
        """
        self.capacity = capacity
        self._loader = loader
        self._write_back = write_back
        self._on_flushed = on_flushed
        self._map: "OrderedDict[int, IvCacheEntry]" = OrderedDict()
        self._evicting: Dict[int, threading.Event] = {}
        self._lock = threading.Lock()

        self.hits = 0
        self.misses = 0
        self.evictions = 0
        self.writebacks = 0
        self.access_trace: Optional[List[int]] = None

    def __len__(self) -> int:
        return len(self._map)

    def __contains__(self, data_set: int) -> bool:
        return data_set in self._map

    def _write_back_entry(self, entry: IvCacheEntry, evict: bool = False) -> bool:
        # caller holds neither self._lock nor entry.lock
        with entry.io_lock:
            with entry.lock:
                if evict:
                    entry.evicted = True
                elif entry.evicted:
                    return False
                if not entry.dirty or entry.iv_array is None:
                    return False
                snapshot = entry.iv_array.copy()
                entry.dirty = False
                entry.flushing = True
            try:
                self._write_back(entry.data_set, snapshot)
            except BaseException:
                with entry.lock:
                    entry.dirty = True
                raise
            finally:
                with entry.lock:
                    entry.flushing = False
            with self._lock:
                self.writebacks += 1
            if self._on_flushed is not None:
                self._on_flushed(entry.data_set, snapshot)
            return True

    def _pop_over_capacity(self) -> List[Tuple[IvCacheEntry, threading.Event]]:
        # caller holds self._lock
        victims = []
        while len(self._map) > self.capacity:
            _, victim = self._map.popitem(last=False)
            done = threading.Event()
            self._evicting[victim.data_set] = done
            self.evictions += 1
            victims.append((victim, done))
        return victims

    def _evict(self, victim: IvCacheEntry, done: threading.Event) -> None:
        try:
            self._write_back_entry(victim, evict=True)
            logger.debug(f"Evicted IV cache line {victim.data_set}")
        finally:
            with self._lock:
                if self._evicting.get(victim.data_set) is done:
                    del self._evicting[victim.data_set]
            done.set()

    def _evict_all(self, victims: List[Tuple[IvCacheEntry, threading.Event]]) -> None:
        # every victim is settled even when one write-back fails
        error: Optional[BaseException] = None
        for victim, done in victims:
            try:
                self._evict(victim, done)
            except BaseException as e:
                error = error or e
        if error is not None:
            raise error

    @contextmanager
    def locked(self, data_set: int) -> Iterator[IvCacheEntry]:
        """
        Yield a data set's cache line with its lock held, loading it on a miss.

        Raises:
            Whatever the loader or an eviction write-back raises; a line that
            failed to load is not cached
        """
        while True:
            victims: List[Tuple[IvCacheEntry, threading.Event]] = []
            pending: Optional[threading.Event] = None
            with self._lock:
                if self.access_trace is not None:
                    self.access_trace.append(data_set)
                entry = self._map.get(data_set)
                if entry is not None:
                    self._map.move_to_end(data_set)
                    self.hits += 1
                    fresh = False
                else:
                    self.misses += 1
                    entry = IvCacheEntry(data_set)
                    entry.lock.acquire()
                    pending = self._evicting.get(data_set)
                    self._map[data_set] = entry
                    fresh = True
                    victims = self._pop_over_capacity()

            if fresh:
                try:
                    self._evict_all(victims)
                    if pending is not None:
                        pending.wait()
                    entry.iv_array = self._loader(data_set)
                except BaseException:
                    entry.evicted = True
                    with self._lock:
                        if self._map.get(data_set) is entry:
                            del self._map[data_set]
                    entry.lock.release()
                    raise
            else:
                entry.lock.acquire()
                if entry.evicted:
                    entry.lock.release()
                    continue
            try:
                yield entry
            finally:
                entry.lock.release()
            return

    def is_dirty(self, data_set: int) -> bool:
        """True while a line holds IVs its metadata sector does not, including during write-back."""
        with self._lock:
            if data_set in self._evicting:
                return True
            entry = self._map.get(data_set)
        if entry is None:
            return False
        with entry.lock:
            return (entry.dirty or entry.flushing) and not entry.evicted

    def flush(self, data_set: int) -> bool:
        """Write back one line if it is cached and dirty; returns whether it was written."""
        with self._lock:
            pending = self._evicting.get(data_set)
            entry = self._map.get(data_set)
        if pending is not None:
            pending.wait()
        if entry is None:
            return False
        return self._write_back_entry(entry)

    def flush_all(self) -> int:
        """Write back every dirty line and wait for evictions in flight; returns lines written."""
        with self._lock:
            entries = list(self._map.values())
            pending = list(self._evicting.values())
        for done in pending:
            done.wait()
        return sum(self._write_back_entry(entry) for entry in entries)

    def dirty_count(self) -> int:
        with self._lock:
            return sum(1 for e in self._map.values() if e.dirty)

    def clear(self) -> None:
        """Drop every line without writing back (used when the tree is rebuilt)."""
        with self._lock:
            for entry in self._map.values():
                entry.evicted = True
            self._map.clear()
