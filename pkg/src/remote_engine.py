"""Remote engine: freshness verification, the tree write path, eventual consistency and recovery."""

import hmac
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .blockdev import Record, SimDevice
from .config import COUNTER_BITS, METADATA_BYTES, WINDOW_SIZE, AttestationConfig, RemoteConfig
from .crypto import CipherSuite, DEFAULT_SUITE, freshness_tag, network_mac, node_hash
from .exceptions import (
    FreshnessError,
    FreshnessViolationError,
    GeometryError,
    IntegrityError,
    JournalFullError,
    MetadataFormatError,
    NetworkFreshnessError,
    ProtocolError,
    SecureStorageError,
)
from .hmt import HasherPool, HazelMerkleTree, rebuild_levels
from .iv_cache import IvCache
from .layout import (
    FRESHNESS_TAG_OFFSET,
    IV_BYTES,
    IV_DTYPE,
    LEGACY_IV_BITS,
    NET_MAC_OFFSET,
    RESERVED_OFFSET,
    MetadataSector,
    SectorMetadata,
    SectorMetadata64,
    data_to_physical,
    decode_metadata,
    decode_metadata_sector,
    encode_metadata,
    encode_metadata_sector,
    from_legacy,
    stamp_network_fields,
    to_legacy,
)
from .logger import setup_logger
from .nvstore import EcJournalEntry, JournalStatus, NvStore
from .transport import (
    AckBody,
    AdminBody,
    Frame,
    FrameType,
    HandshakeResponder,
    ReadBody,
    ReadRespBody,
    RefreshBody,
    SessionState,
    WriteBody,
    message_frame,
)

logger = setup_logger(__name__)

SETTLE_TIMEOUT_S = 30.0
RELIEF_POLL_S = 0.25


class RemoteEngine:
    """
    Storage-side engine of one device.

    With freshness enabled every write journals its sectors, persists data
    with a fast-path freshness tag, updates the IV cache and the level-1 node
    of its data set, and hands propagation to the hasher pool (or runs it
    inline when eventual consistency is off). Reads are verified against the
    tree before they leave the engine. With freshness disabled the engine
    only checks network freshness and stores what it receives.
    """

    def __init__(
        self,
        device: SimDevice,
        nv: NvStore,
        config: RemoteConfig = RemoteConfig(),
        suite: CipherSuite = DEFAULT_SUITE,
        freshness: bool = True
    ):
        self.device = device
        self.geometry = device.geometry
        self.nv = nv
        self.config = config
        self.suite = suite
        self.freshness = freshness
        self.freshness_key = nv.freshness_key

        empty = node_hash(np.zeros(self.geometry.data_set_size, dtype=IV_DTYPE),
                          self.geometry.data_set_size, suite)
        self.tree = HazelMerkleTree([empty] * self.geometry.data_set_count, config.tree_branching, suite)
        self.cache = IvCache(self._load_line, self._store_line, config.cache_capacity, self._on_flushed)
        self.hashers: Optional[HasherPool] = None
        self.flusher: Optional[ThreadPoolExecutor] = None
        if freshness and config.eventual_consistency:
            self.hashers = HasherPool(config.hasher_count)
            self.flusher = ThreadPoolExecutor(max_workers=config.flusher_count, thread_name_prefix="flusher")
        self._flush_watermark = max(1, int(config.journal_capacity * config.flush_watermark))
        self._flush_queued: Set[int] = set()
        self._flush_lock = threading.Lock()

        self._stats: Counter = Counter()
        self._stats_lock = threading.Lock()
        self._max_backlog = 0
        self.journal_trace: Optional[List[EcJournalEntry]] = None

    @classmethod
    def format(
        cls,
        device: SimDevice,
        nv_path: Optional[Path] = None,
        config: RemoteConfig = RemoteConfig(),
        suite: CipherSuite = DEFAULT_SUITE,
        freshness: bool = True
    ) -> "RemoteEngine":
        """Start a fresh NV store for a zero-filled device and persist the empty-tree root."""
        nv = NvStore(nv_path, capacity=config.journal_capacity)
        engine = cls(device, nv, config, suite, freshness)
        nv.set_root(engine.tree.root)
        logger.info(
            f"Formatted {device.path.name}: {engine.geometry.data_set_count} data sets, "
            f"tree height {engine.tree.height}"
        )
        return engine

    @classmethod
    def open(
        cls,
        device: SimDevice,
        nv: NvStore,
        config: RemoteConfig = RemoteConfig(),
        suite: CipherSuite = DEFAULT_SUITE,
        freshness: bool = True
    ) -> "RemoteEngine":
        """Attach to an existing device and NV store, running crash recovery."""
        engine = cls(device, nv, config, suite, freshness)
        try:
            engine.recover()
        except BaseException:
            engine.close()
            raise
        return engine

    # -- helpers ---------------------------------------------------------

    def _count(self, key: str, amount: int = 1) -> None:
        with self._stats_lock:
            self._stats[key] += amount

    def _check_range(self, start: int, count: int) -> None:
        if count <= 0 or start < 0 or start + count > self.geometry.data_sector_count:
            raise GeometryError(
                f"Sectors [{start}, {start + count}) outside the {self.geometry.data_sector_count} data sectors"
            )

    def _level1(self, iv_array: np.ndarray) -> bytes:
        return node_hash(iv_array, self.geometry.data_set_size, self.suite)

    def _tag(self, sector: int, iv: int, level1: bytes) -> bytes:
        return freshness_tag(self.freshness_key, sector, iv, level1, self.suite)

    def _load_line(self, data_set: int) -> np.ndarray:
        raw = self.device.read_sectors(data_set, 1)[0][0]
        first = data_set * self.geometry.data_set_size
        try:
            ivs = decode_metadata_sector(raw, data_set, self.geometry).iv_array
        except MetadataFormatError as e:
            raise FreshnessError(first, f"Metadata sector {data_set} is corrupt: {e}") from e
        if self._level1(ivs) != self.tree.current[data_set]:
            logger.error(f"Metadata sector {data_set} does not match the tree")
            raise FreshnessError(first, f"Metadata sector {data_set} does not match the tree")
        return ivs

    def _store_line(self, data_set: int, ivs: np.ndarray) -> None:
        sector = encode_metadata_sector(MetadataSector(data_set, ivs), self.geometry)
        self.device.write_sectors(data_set, [(sector, bytes(self.geometry.metadata_bytes))])

    def _on_flushed(self, data_set: int, ivs: np.ndarray) -> None:
        span = self.geometry.data_set_range(data_set)
        done = [
            e for e in self.nv.live_in(span)
            if e.status == JournalStatus.TREE_UPDATED and int(ivs[e.sector - span.start]) == e.new_iv
        ]
        self.nv.retire(done)

    def _stored_metadata(self, meta: SectorMetadata64, tag: Optional[bytes]) -> bytes:
        if self.geometry.is_legacy:
            return encode_metadata(to_legacy(meta))
        stored = meta.persisted()
        if tag is not None:
            stored = replace(stored, freshness_tag=tag)
        return encode_metadata(stored)

    # -- write path ------------------------------------------------------

    def _verify_incoming(self, session: SessionState, start: int, records: Sequence[Record]) -> List[SectorMetadata64]:
        metas = []
        for k, (_, raw) in enumerate(records):
            sector = start + k
            meta = decode_metadata(raw)
            if not isinstance(meta, SectorMetadata64):
                raise MetadataFormatError("Wire metadata must be 64 bytes")
            expected = network_mac(session.network_key, meta.iv_counter, meta.net_counter, self.suite)
            if not hmac.compare_digest(expected, meta.net_mac):
                self._count("network_rejects")
                raise NetworkFreshnessError(sector, "network MAC mismatch")
            if not session.window.check(meta.net_counter):
                self._count("network_rejects")
                raise NetworkFreshnessError(sector, f"replayed or stale counter {meta.net_counter}")
            if meta.iv_counter == 0:
                raise MetadataFormatError(f"Sector {sector} carries the reserved IV counter 0")
            if self.geometry.is_legacy:
                to_legacy(meta)
            metas.append(meta)
        return metas

    def handle_write(self, session: SessionState, start: int, records: Sequence[Record]) -> int:
        """
        Persist a run of sectors sealed by the local instance.

        Args:
            session: Session the frame arrived on
            start: First data-sector index
            records: (ciphertext, 64-byte wire metadata) per sector

        Returns:
            Number of sectors written

        Raises:
            NetworkFreshnessError: If a record fails the network MAC or window
            GeometryError: If the range leaves the data region
        """
        self._check_range(start, len(records))
        metas = self._verify_incoming(session, start, records)

        if not self.freshness:
            stored = [(data, self._stored_metadata(meta, None)) for (data, _), meta in zip(records, metas)]
            self.device.write_sectors(data_to_physical(start, self.geometry), stored)
        else:
            size = self.geometry.data_set_size
            k = 0
            while k < len(records):
                data_set = (start + k) // size
                end = min(len(records), (data_set + 1) * size - start)
                items = [(start + i, records[i][0], metas[i]) for i in range(k, end)]
                self._write_data_set(data_set, items)
                k = end
        self._count("writes", len(records))
        return len(records)

    def _admit(self, sectors: List[int]) -> None:
        deadline = time.monotonic() + SETTLE_TIMEOUT_S
        waited = False
        while True:
            try:
                busy = self.nv.admit(sectors)
            except JournalFullError:
                if time.monotonic() >= deadline:
                    logger.error("Journal still full after waiting for retirement")
                    raise
                if not waited:
                    self._count("journal_full")
                    waited = True
                self._relieve_journal(len(sectors), deadline)
                continue
            if busy is None:
                return
            self._settle(busy)

    def _settle(self, sector: int) -> None:
        """Wait until a busy sector's previous write has fully settled and retire it."""
        self._count("settles")
        entry = self.nv.entry_at(sector)
        if entry is None:
            if not self.nv.wait_unclaimed(sector, SETTLE_TIMEOUT_S):
                raise SecureStorageError(f"Sector {sector} stayed claimed by another write")
            return
        if not self.nv.wait_for(entry, JournalStatus.TREE_UPDATED, SETTLE_TIMEOUT_S):
            raise SecureStorageError(f"Journal entry of sector {sector} did not reach the tree")
        data_set = sector // self.geometry.data_set_size
        self.cache.flush(data_set)
        if self.nv.entry_at(sector) is entry and not self.cache.is_dirty(data_set):
            self.nv.retire([entry])

    def _settled_data_sets(self) -> List[int]:
        """Data sets holding entries that reached the root but not their metadata sector."""
        size = self.geometry.data_set_size
        return sorted({e.sector // size for e in self.nv.live_entries() if e.status == JournalStatus.TREE_UPDATED})

    def _retire_clean(self, data_set: Optional[int] = None) -> None:
        """Retire settled entries (of one data set, or all) whose cache line is written back."""
        size = self.geometry.data_set_size
        live = self.nv.live_entries() if data_set is None else self.nv.live_in(self.geometry.data_set_range(data_set))
        settled = [
            e for e in live
            if e.status == JournalStatus.TREE_UPDATED and not self.cache.is_dirty(e.sector // size)
        ]
        self.nv.retire(settled)

    def _relieve_journal(self, needed: int, deadline: float) -> None:
        """
        Free journal slots for a write that found the journal full.

        Settled lines are written back (by the flusher with eventual consistency,
        inline without it), then the writer waits for slots to retire.
        """
        self._retire_clean()
        settled = self._settled_data_sets()
        if self.flusher is not None:
            for data_set in settled:
                self._schedule_flush(data_set)
        else:
            for data_set in settled:
                self.cache.flush(data_set)
        remaining = deadline - time.monotonic()
        if remaining > 0:
            self.nv.wait_free(needed, min(remaining, RELIEF_POLL_S))

    def _schedule_flush(self, data_set: int) -> None:
        flusher = self.flusher
        if flusher is None:
            return
        with self._flush_lock:
            if data_set in self._flush_queued:
                return
            self._flush_queued.add(data_set)
        flusher.submit(self._background_flush, data_set)

    def _background_flush(self, data_set: int) -> None:
        with self._flush_lock:
            self._flush_queued.discard(data_set)
        try:
            if self.cache.flush(data_set):
                self._count("background_flushes")
            self._retire_clean(data_set)
        except SecureStorageError as e:
            logger.warning(f"Background write-back of data set {data_set} failed: {e}")

    def _drain_journal(self) -> None:
        if self.hashers is not None:
            self.hashers.join()
        self.cache.flush_all()
        self._retire_clean()

    def _write_data_set(self, data_set: int, items: List[Tuple[int, bytes, SectorMetadata64]]) -> None:
        sectors = [sector for sector, _, _ in items]
        base = data_set * self.geometry.data_set_size
        self._admit(sectors)
        recorded = False
        try:
            with self.cache.locked(data_set) as line:
                entries = [
                    EcJournalEntry(
                        sector=sector,
                        old_iv=int(line.iv_array[sector - base]),
                        new_iv=meta.iv_counter,
                        key_id=meta.key_id,
                    )
                    for sector, _, meta in items
                ]
                self.nv.record(entries)
                recorded = True

                ivs = line.iv_array.copy()
                for sector, _, meta in items:
                    ivs[sector - base] = meta.iv_counter
                level1 = self._level1(ivs)
                legacy = self.geometry.is_legacy
                stored = [
                    (data, self._stored_metadata(meta, None if legacy else self._tag(sector, meta.iv_counter, level1)))
                    for sector, data, meta in items
                ]
                self.device.write_sectors(data_to_physical(sectors[0], self.geometry), stored)
                self.nv.mark(entries, JournalStatus.DATA_PERSISTED)

                line.iv_array = ivs
                line.dirty = True
                self.tree.current[data_set] = level1
        except BaseException:
            if not recorded:
                self.nv.release(sectors)
            raise

        if self.hashers is None:
            self._propagate(data_set, entries)
        now = time.perf_counter()
        for entry in entries:
            entry.acked_at = now
        if self.journal_trace is not None:
            self.journal_trace.extend(entries)

        if self.hashers is not None:
            self.hashers.submit(lambda: self._propagate(data_set, entries))
            backlog = self.hashers.backlog()
            if backlog > self._max_backlog:
                self._max_backlog = backlog

    def _propagate(self, data_set: int, entries: List[EcJournalEntry]) -> None:
        span = self.geometry.data_set_range(data_set)
        own = {e.sector for e in entries}

        def level1_value() -> bytes:
            # other writes of this data set that have not reached level 1 yet stay at their old IV
            with self.cache.locked(data_set) as line:
                ivs = line.iv_array.copy()
                for other in self.nv.live_in(span):
                    if other.sector not in own and not other.level1_applied:
                        ivs[other.sector - span.start] = other.old_iv
                for entry in entries:
                    entry.level1_applied = True
                return self._level1(ivs)

        self.tree.propagate(data_set, level1_value, lambda root: self.nv.commit_root(root, entries))
        if not self.cache.is_dirty(data_set):
            self.nv.retire(entries)
        elif self.flusher is not None and self.nv.live_count >= self._flush_watermark:
            self._schedule_flush(data_set)
        self._count("propagations")

    # -- read path -------------------------------------------------------

    def _decode_stored(self, sector: int, raw: bytes) -> SectorMetadata:
        try:
            return decode_metadata(raw)
        except MetadataFormatError as e:
            raise IntegrityError(sector, f"Metadata of sector {sector} is corrupt") from e

    def _verify_full(self, sector: int) -> Record:
        """Re-read a sector under its cache line and compare its IV with the cached one."""
        data_set, offset = divmod(sector, self.geometry.data_set_size)
        physical = data_to_physical(sector, self.geometry)
        with self.cache.locked(data_set) as line:
            data, raw = self.device.read_sectors(physical, 1)[0]
            meta = self._decode_stored(sector, raw)
            level1 = self._level1(line.iv_array)
            if level1 != self.tree.current[data_set]:
                raise FreshnessError(sector, f"Cached IVs of data set {data_set} disagree with the tree")
            if int(line.iv_array[offset]) != meta.iv_counter:
                logger.warning(f"Stale or rolled-back sector {sector}")
                raise FreshnessError(sector)
            self._count("full_path")
            if meta.is_unwritten:
                self._count("unwritten_reads")
            elif self.config.refresh_on_full_path and isinstance(meta, SectorMetadata64):
                fresh = replace(meta, freshness_tag=self._tag(sector, meta.iv_counter, level1))
                raw = encode_metadata(fresh)
                self.device.write_sectors(physical, [(data, raw)])
                self._count("refreshed")
        return data, raw

    def _verify_run(self, start: int, records: List[Record]) -> List[Record]:
        """
        Check a run of sectors against the tree, one data set at a time.

        Each data set's level-1 node is read once; a sector whose freshness tag
        matches it is accepted as read, any other sector takes the full path.
        """
        size = self.geometry.data_set_size
        verified = list(records)
        fast = 0
        k = 0
        while k < len(records):
            data_set = (start + k) // size
            end = min(len(records), (data_set + 1) * size - start)
            level1 = self.tree.current[data_set]
            for i in range(k, end):
                raw = records[i][1]
                if len(raw) == METADATA_BYTES:
                    tag = raw[FRESHNESS_TAG_OFFSET:NET_MAC_OFFSET]
                    iv = int.from_bytes(raw[:IV_BYTES], "little")
                    if any(tag) and hmac.compare_digest(self._tag(start + i, iv, level1), tag):
                        fast += 1
                        continue
                verified[i] = self._verify_full(start + i)
            k = end
        if fast:
            self._count("fast_path", fast)
        return verified

    def handle_read(self, session: SessionState, start: int, count: int) -> List[Record]:
        """
        Read, verify and stamp a run of sectors for the local instance.

        Returns:
            (ciphertext, 64-byte wire metadata) per sector, with network MACs

        Raises:
            FreshnessError: If a sector's IV disagrees with the tree
            IntegrityError: If a sector's metadata cannot be decoded
        """
        self._check_range(start, count)
        records = self.device.read_sectors(data_to_physical(start, self.geometry), count)
        if self.freshness:
            records = self._verify_run(start, records)

        first = session.reserve(count)
        out = []
        for k, (data, raw) in enumerate(records):
            iv = int.from_bytes(raw[:IV_BYTES], "little")
            if len(raw) != METADATA_BYTES or any(raw[RESERVED_OFFSET:]) or iv >> COUNTER_BITS:
                # legacy metadata is widened; corrupt metadata raises here
                meta = self._decode_stored(start + k, raw)
                raw = encode_metadata(from_legacy(meta))
                iv = meta.iv_counter
            j = first + k
            mac = network_mac(session.network_key, iv, j, self.suite)
            out.append((data, stamp_network_fields(raw, mac, j)))
        self._count("reads", count)
        return out

    # -- maintenance -----------------------------------------------------

    def refresh_tags(self, first_data_set: int, last_data_set: int) -> int:
        """
        Rewrite the freshness tags of every written sector in a range of data sets.

        Returns:
            Number of sectors refreshed

        Raises:
            FreshnessError: If a sector's IV disagrees with the cached IVs
        """
        if not 0 <= first_data_set <= last_data_set < self.geometry.data_set_count:
            raise GeometryError(f"Invalid data-set range [{first_data_set}, {last_data_set}]")
        if not self.freshness or self.geometry.is_legacy:
            return 0
        refreshed = 0
        for data_set in range(first_data_set, last_data_set + 1):
            with self.cache.locked(data_set) as line:
                if not line.iv_array.any():
                    continue
                level1 = self.tree.current[data_set]
                span = self.geometry.data_set_range(data_set)
                physical = data_to_physical(span.start, self.geometry)
                records = self.device.read_sectors(physical, len(span))
                rewritten = []
                for k, (data, raw) in enumerate(records):
                    iv = int(line.iv_array[k])
                    if iv == 0:
                        rewritten.append((data, raw))
                        continue
                    meta = decode_metadata(raw)
                    if meta.iv_counter != iv:
                        raise FreshnessError(span.start + k)
                    tagged = replace(meta, freshness_tag=self._tag(span.start + k, iv, level1))
                    rewritten.append((data, encode_metadata(tagged)))
                    refreshed += 1
                self.device.write_sectors(physical, rewritten)
        self._count("refreshed", refreshed)
        logger.info(f"Refreshed {refreshed} freshness tags in data sets {first_data_set}-{last_data_set}")
        return refreshed

    def drain(self) -> int:
        """
        Finish every pending propagation, write back the cache and retire the journal.

        Returns:
            Journal entries still live (0 when no writes are in flight)
        """
        if not self.freshness:
            return 0
        self._drain_journal()
        live = self.nv.live_count
        logger.info(f"Drained: {live} journal entries live, root {self.nv.root.hex()}")
        return live

    def _read_aggregated(self) -> np.ndarray:
        geom = self.geometry
        records = self.device.read_sectors(0, geom.data_set_count)
        rows = []
        for data_set, (raw, _) in enumerate(records):
            try:
                rows.append(decode_metadata_sector(raw, data_set, geom).iv_array)
            except MetadataFormatError as e:
                raise FreshnessViolationError(f"Metadata sector {data_set} is corrupt: {e}") from e
        return np.vstack(rows)

    def rebuild_from_disk(self) -> List[List[bytes]]:
        """Recompute the whole tree from the on-disk aggregated IVs."""
        return rebuild_levels(
            [self._level1(row) for row in self._read_aggregated()],
            self.config.tree_branching,
            self.suite,
        )

    def recover(self) -> bytes:
        """
        Rebuild the tree after a restart and check it against the persisted root.

        The aggregated IVs are overlaid with the per-sector IVs of every journaled
        sector, each of which must be an IV its journal entry allows. With writes
        that never reached the root reverted to their old IV, the overlay must
        reproduce the NV root exactly, and every other sector must carry the IV
        recorded in its metadata sector.

        Returns:
            The new root

        Raises:
            FreshnessViolationError: If disk and NV state disagree
        """
        if not self.freshness:
            return self.nv.root
        if self.hashers is not None:
            self.hashers.join()
        geom = self.geometry
        size = geom.data_set_size
        aggregated = self._read_aggregated()
        entries = self.nv.live_entries()

        column = self.device.read_metadata_column(geom.data_set_count, geom.data_sector_count, 8)
        per_sector = column.copy().view(IV_DTYPE).reshape(-1)
        if geom.is_legacy:
            per_sector = per_sector & np.uint64(2**LEGACY_IV_BITS - 1)

        overlay = aggregated.reshape(-1).copy()
        for entry in entries:
            on_disk = int(per_sector[entry.sector])
            # a PENDING write may or may not have reached the sector; later statuses must have
            allowed = (entry.new_iv,)
            if entry.status == JournalStatus.PENDING:
                allowed = (entry.old_iv, entry.new_iv)
            if on_disk not in allowed:
                logger.error(f"Journaled sector {entry.sector} carries IV {on_disk}, journal allows {allowed}")
                raise FreshnessViolationError(
                    f"Journaled sector {entry.sector} carries IV {on_disk}, journal allows {allowed}"
                )
            overlay[entry.sector] = on_disk
        scratch = overlay.copy()
        for entry in entries:
            if entry.status < JournalStatus.TREE_UPDATED:
                scratch[entry.sector] = entry.old_iv

        scratch_root = rebuild_levels(
            [self._level1(row) for row in scratch.reshape(-1, size)],
            self.config.tree_branching,
            self.suite,
        )[-1][0]
        if scratch_root != self.nv.root:
            logger.error("Recovered tree root does not match the NV root")
            raise FreshnessViolationError("Recovered tree root does not match the persisted root")

        stale = np.flatnonzero(per_sector != overlay[:geom.data_sector_count])
        if stale.size:
            logger.error(f"{stale.size} sectors disagree with their aggregated IVs")
            raise FreshnessViolationError(
                f"Sector {int(stale[0])} disagrees with its aggregated IV ({stale.size} sectors in total)"
            )

        rows = overlay.reshape(-1, size)
        self.tree.reset([self._level1(row) for row in rows])
        for data_set in np.flatnonzero((rows != aggregated).any(axis=1)):
            self._store_line(int(data_set), rows[data_set])
        self.cache.clear()
        self.nv.retire_all(self.tree.root)
        logger.info(f"Recovered {len(entries)} journal entries, root {self.tree.root.hex()}")
        return self.tree.root

    def metrics(self) -> Dict[str, int]:
        with self._stats_lock:
            stats = dict(self._stats)
        stats.update(
            cache_hits=self.cache.hits,
            cache_misses=self.cache.misses,
            cache_evictions=self.cache.evictions,
            cache_writebacks=self.cache.writebacks,
            hasher_backlog=self.hashers.backlog() if self.hashers is not None else 0,
            max_hasher_backlog=self._max_backlog,
            journal_live=self.nv.live_count,
        )
        return stats

    def close(self) -> None:
        if self.hashers is not None:
            self.hashers.shutdown()
            self.hashers = None
        if self.flusher is not None:
            self.flusher.shutdown(wait=True)
            self.flusher = None
        self.nv.close()
        self.device.flush()


class RemoteFrameHandler:
    """Serves one remote engine over frames."""

    def __init__(
        self,
        engine: RemoteEngine,
        attestation: AttestationConfig = AttestationConfig(),
        window_size: int = WINDOW_SIZE
    ):
        self.engine = engine
        self.responder = HandshakeResponder(
            attestation.psk,
            attestation.remote_measurement,
            attestation.local_measurement,
            window_size=window_size,
            suite=engine.suite,
        )

    def handle(self, frame: Frame) -> Frame:
        if frame.type == FrameType.HELLO:
            return self.responder.handle_hello(frame)
        if frame.type == FrameType.ATTEST:
            return self.responder.handle_attest(frame)

        session = self.responder.session(frame.session_id)
        sid = frame.session_id
        if frame.type == FrameType.WRITE:
            body = WriteBody.decode(frame.body)
            written = self.engine.handle_write(session, body.start, body.records)
            return message_frame(FrameType.ACK, sid, AckBody(body.request_id, written))
        if frame.type == FrameType.READ:
            body = ReadBody.decode(frame.body)
            records = self.engine.handle_read(session, body.start, body.count)
            return message_frame(FrameType.READ_RESP, sid, ReadRespBody(body.request_id, body.start, records))
        if frame.type == FrameType.REFRESH:
            body = RefreshBody.decode(frame.body)
            refreshed = self.engine.refresh_tags(body.first_data_set, body.last_data_set)
            return message_frame(FrameType.ACK, sid, AckBody(body.request_id, refreshed))
        if frame.type == FrameType.DRAIN:
            body = AdminBody.decode(frame.body)
            return message_frame(FrameType.ACK, sid, AckBody(body.request_id, self.engine.drain()))
        if frame.type == FrameType.RECOVER:
            body = AdminBody.decode(frame.body)
            self.engine.recover()
            return message_frame(FrameType.ACK, sid, AckBody(body.request_id))
        raise ProtocolError(f"Remote engine does not serve {frame.type.name} frames")
