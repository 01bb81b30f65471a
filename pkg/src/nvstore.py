"""Crash-protected NV store: tree root, freshness key and the eventual-consistency journal."""

import os
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set

from .config import JOURNAL_CAPACITY, NODE_BYTES
from .crypto import random_key
from .exceptions import JournalFullError, SecureStorageError
from .logger import setup_logger

logger = setup_logger(__name__)

NV_MAGIC = b"SNVN"
NV_VERSION = 1
HEADER_BYTES = 128
ENTRY_BYTES = 32

# magic | version | pad | commit_seq | root | k_f | capacity | head | live
_HEADER = struct.Struct("<4sB3xQ16s32sIII")
# status | reserved | device_slot | key_id | sector | old_iv | new_iv
_ENTRY = struct.Struct("<BxHIQQQ")


class JournalStatus(IntEnum):
    FREE = 0
    PENDING = 1
    DATA_PERSISTED = 2
    TREE_UPDATED = 3
    RETIRED = 4


@dataclass(eq=False)
class EcJournalEntry:
    """One in-flight sector write: [status, location, old IV, new IV] plus key id."""

    sector: int
    old_iv: int
    new_iv: int
    key_id: int
    status: JournalStatus = JournalStatus.PENDING
    device_slot: int = 0
    slot: int = -1
    # in-memory only
    level1_applied: bool = field(default=False, repr=False)
    acked_at: Optional[float] = field(default=None, repr=False)
    tree_updated_at: Optional[float] = field(default=None, repr=False)

    def encode(self) -> bytes:
        return _ENTRY.pack(
            self.status, self.device_slot, self.key_id, self.sector, self.old_iv, self.new_iv
        )


class NvStore:
    """
    Simulated non-volatile memory of the remote instance.

    Every mutation updates the in-memory image and commits under one lock, so
    the committed image always pairs the root with the journal statuses it
    reflects. With a path the file mirrors the image: a commit writes only the
    slots it changed, then the header.
    """

    def __init__(
        self,
        path: Optional[Path] = None,
        capacity: int = JOURNAL_CAPACITY,
        freshness_key: Optional[bytes] = None,
        root: bytes = bytes(NODE_BYTES),
        fsync: bool = False
    ):
        self.path = Path(path) if path is not None else None
        self.capacity = capacity
        self.fsync = fsync
        self.freshness_key = freshness_key or random_key()
        self.root = root
        self.commit_seq = 0

        self._image = bytearray(HEADER_BYTES + capacity * ENTRY_BYTES)
        self._slots: List[Optional[EcJournalEntry]] = [None] * capacity
        self._by_sector: Dict[int, EcJournalEntry] = {}
        self._claimed: Set[int] = set()
        self._head = 0
        self._lock = threading.Lock()
        self.changed = threading.Condition(self._lock)
        self._init_file()

        self._commit()

    # -- persistence -----------------------------------------------------

    def _init_file(self) -> None:
        self._fd: Optional[int] = None
        self._dirty_slots: Set[int] = set()
        self._rewrite = False
        self.commit_bytes = 0
        if self.path is not None:
            self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
            os.ftruncate(self._fd, len(self._image))
            self._pwrite(slice(0, len(self._image)))

    def _write_header(self) -> None:
        _HEADER.pack_into(
            self._image, 0, NV_MAGIC, NV_VERSION, self.commit_seq, self.root,
            self.freshness_key, self.capacity, self._head, len(self._by_sector),
        )

    def _slot_span(self, slot: int) -> slice:
        return slice(HEADER_BYTES + slot * ENTRY_BYTES, HEADER_BYTES + (slot + 1) * ENTRY_BYTES)

    def _write_slot(self, entry: EcJournalEntry) -> None:
        self._image[self._slot_span(entry.slot)] = entry.encode()
        self._dirty_slots.add(entry.slot)

    def _pwrite(self, span: slice) -> None:
        self.commit_bytes += os.pwrite(self._fd, self._image[span], span.start)

    def _commit(self) -> None:
        # caller holds self._lock, or is the constructor
        self.commit_seq += 1
        self._write_header()
        if self._fd is not None:
            if self._rewrite:
                self._pwrite(slice(0, len(self._image)))
            else:
                for slot in sorted(self._dirty_slots):
                    self._pwrite(self._slot_span(slot))
                self._pwrite(slice(0, HEADER_BYTES))
            if self.fsync:
                os.fsync(self._fd)
        self._dirty_slots.clear()
        self._rewrite = False

    def committed_image(self) -> bytes:
        """The last committed NV content."""
        with self._lock:
            return bytes(self._image)

    def close(self) -> None:
        with self._lock:
            if self._fd is not None:
                os.close(self._fd)
                self._fd = None

    @classmethod
    def from_image(
        cls,
        image: bytes,
        path: Optional[Path] = None,
        fsync: bool = False
    ) -> "NvStore":
        """
        Rebuild an NV store from a committed image.

        Raises:
            SecureStorageError: If the image is not a valid NV layout
        """
        if len(image) < HEADER_BYTES:
            raise SecureStorageError("NV image too short")
        magic, version, seq, root, k_f, capacity, head, _live = _HEADER.unpack_from(image)
        if magic != NV_MAGIC or version != NV_VERSION:
            raise SecureStorageError("NV image has a bad magic or version")
        if len(image) != HEADER_BYTES + capacity * ENTRY_BYTES:
            raise SecureStorageError("NV image size does not match its journal capacity")

        store = cls.__new__(cls)
        store.path = Path(path) if path is not None else None
        store.capacity = capacity
        store.fsync = fsync
        store.freshness_key = k_f
        store.root = root
        store.commit_seq = seq
        store._image = bytearray(image)
        store._slots = [None] * capacity
        store._by_sector = {}
        store._claimed = set()
        store._head = head
        store._lock = threading.Lock()
        store.changed = threading.Condition(store._lock)
        store._init_file()

        for slot in range(capacity):
            status, dev, key_id, sector, old_iv, new_iv = _ENTRY.unpack_from(
                image, HEADER_BYTES + slot * ENTRY_BYTES
            )
            if status in (JournalStatus.FREE, JournalStatus.RETIRED):
                continue
            entry = EcJournalEntry(
                sector=sector, old_iv=old_iv, new_iv=new_iv, key_id=key_id,
                status=JournalStatus(status), device_slot=dev, slot=slot,
            )
            store._slots[slot] = entry
            store._by_sector[sector] = entry
        logger.info(f"Loaded NV store: seq {seq}, {len(store._by_sector)} live journal entries")
        return store

    @classmethod
    def open(cls, path: Path, fsync: bool = False) -> "NvStore":
        with open(path, "rb") as f:
            return cls.from_image(f.read(), path=path, fsync=fsync)

    # -- journal ---------------------------------------------------------

    @property
    def live_count(self) -> int:
        return len(self._by_sector)

    def free_slots(self) -> int:
        with self._lock:
            return self.capacity - len(self._by_sector) - len(self._claimed)

    def admit(self, sectors: Sequence[int]) -> Optional[int]:
        """
        Claim sectors for a new write (single-writer rule) and reserve journal slots.

        Returns:
            None when all sectors were claimed, else the first busy sector (nothing claimed)

        Raises:
            JournalFullError: If fewer free slots than sectors remain
        """
        with self._lock:
            for sector in sectors:
                if sector in self._by_sector or sector in self._claimed:
                    return sector
            if self.capacity - len(self._by_sector) - len(self._claimed) < len(sectors):
                raise JournalFullError(
                    f"Journal full: {len(self._by_sector)} live, {len(self._claimed)} claimed"
                )
            self._claimed.update(sectors)
            return None

    def release(self, sectors: Iterable[int]) -> None:
        """Drop claims that never turned into journal entries."""
        with self._lock:
            self._claimed.difference_update(sectors)
            self.changed.notify_all()

    def _allocate_slot(self) -> int:
        for step in range(self.capacity):
            slot = (self._head + step) % self.capacity
            if self._slots[slot] is None:
                self._head = (slot + 1) % self.capacity
                return slot
        raise JournalFullError("No free journal slot")

    def record(self, entries: Sequence[EcJournalEntry]) -> None:
        """Persist new PENDING entries for previously admitted sectors."""
        with self._lock:
            for entry in entries:
                if entry.sector not in self._claimed:
                    raise SecureStorageError(f"Sector {entry.sector} was not admitted")
                assert entry.sector not in self._by_sector, "two live entries for one sector"
                entry.slot = self._allocate_slot()
                entry.status = JournalStatus.PENDING
                self._claimed.discard(entry.sector)
                self._slots[entry.slot] = entry
                self._by_sector[entry.sector] = entry
                self._write_slot(entry)
            self._commit()
            self.changed.notify_all()

    def mark(self, entries: Sequence[EcJournalEntry], status: JournalStatus) -> None:
        with self._lock:
            for entry in entries:
                entry.status = status
                self._write_slot(entry)
            self._commit()
            self.changed.notify_all()

    def commit_root(self, root: bytes, entries: Sequence[EcJournalEntry]) -> None:
        """Atomically persist a new root and mark the entries it reflects TREE_UPDATED."""
        now = time.perf_counter()
        with self._lock:
            self.root = root
            for entry in entries:
                entry.status = JournalStatus.TREE_UPDATED
                entry.tree_updated_at = now
                self._write_slot(entry)
            self._commit()
            self.changed.notify_all()

    def set_root(self, root: bytes) -> None:
        with self._lock:
            self.root = root
            self._commit()

    def retire(self, entries: Sequence[EcJournalEntry]) -> None:
        """Retire entries and free their slots."""
        if not entries:
            return
        with self._lock:
            for entry in entries:
                if self._by_sector.get(entry.sector) is not entry:
                    continue
                entry.status = JournalStatus.RETIRED
                self._image[self._slot_span(entry.slot)] = bytes(ENTRY_BYTES)
                self._dirty_slots.add(entry.slot)
                self._slots[entry.slot] = None
                del self._by_sector[entry.sector]
            self._commit()
            self.changed.notify_all()

    def retire_all(self, root: bytes) -> None:
        """Replace the root and clear the journal in one commit (end of recovery)."""
        with self._lock:
            self.root = root
            for entry in self._by_sector.values():
                entry.status = JournalStatus.RETIRED
            self._slots = [None] * self.capacity
            self._by_sector.clear()
            self._image[HEADER_BYTES:] = bytes(self.capacity * ENTRY_BYTES)
            self._rewrite = True
            self._commit()
            self.changed.notify_all()

    def entry_at(self, sector: int) -> Optional[EcJournalEntry]:
        with self._lock:
            return self._by_sector.get(sector)

    def live_entries(self) -> List[EcJournalEntry]:
        with self._lock:
            return list(self._by_sector.values())

    def live_in(self, sectors: range) -> List[EcJournalEntry]:
        """Live entries whose sector falls in a range."""
        with self._lock:
            if len(self._by_sector) < len(sectors):
                return [e for s, e in self._by_sector.items() if s in sectors]
            return [self._by_sector[s] for s in sectors if s in self._by_sector]

    def wait_unclaimed(self, sector: int, timeout: float = 5.0) -> bool:
        """Block until an admitted sector has been recorded or released."""
        with self.changed:
            return self.changed.wait_for(lambda: sector not in self._claimed, timeout=timeout)

    def wait_for(self, entry: EcJournalEntry, status: JournalStatus, timeout: float = 5.0) -> bool:
        """Block until an entry reaches at least `status`."""
        with self.changed:
            return self.changed.wait_for(lambda: entry.status >= status, timeout=timeout)

    def wait_free(self, count: int, timeout: float = 5.0) -> bool:
        """Block until at least `count` journal slots are neither live nor claimed."""
        with self.changed:
            return self.changed.wait_for(
                lambda: self.capacity - len(self._by_sector) - len(self._claimed) >= count,
                timeout=timeout,
            )
