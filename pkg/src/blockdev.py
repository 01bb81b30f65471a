"""File-backed simulated NVMe device with extended LBAs."""

import itertools
import threading
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import DeviceCrashedError, DeviceError, OutOfRangeError
from .layout import DeviceGeometry
from .logger import setup_logger

logger = setup_logger(__name__)

Record = Tuple[bytes, bytes]  # (sector data, inline metadata)


class SimDevice:
    """
    Simulated extended-LBA device backed by a raw file of B * (4096 + M) bytes.

    Each physical sector is stored with its metadata inline directly after it.
    A sector write is all-or-nothing; multi-sector writes persist in order, so a
    crash leaves a prefix of the submitted sectors.
    """

    def __init__(
        self,
        path: Path,
        geometry: DeviceGeometry,
        delay_us: float = 0.0,
        trace: bool = False
    ):
        """
        Open an existing backing file.

        Args:
            path: Backing file
            geometry: Device geometry; the file size must match it
            delay_us: Fixed delay added to every read/write call
            trace: Record every sector access in self.trace
        """
        self.path = Path(path)
        self.geometry = geometry
        self.delay_s = delay_us / 1e6
        self.tracing = trace
        self.trace: List[Tuple[str, int]] = []

        self._lock = threading.Lock()
        self._snapshots: Dict[int, np.ndarray] = {}
        self._snapshot_ids = itertools.count(1)
        self._crash_after: Optional[int] = None
        self._crashed = False
        self.persisted_writes = 0

        expected = geometry.total_sectors * geometry.record_bytes
        if not self.path.exists():
            raise DeviceError(f"Backing file not found: {self.path}")
        if self.path.stat().st_size != expected:
            raise DeviceError(
                f"Backing file {self.path} has {self.path.stat().st_size} bytes, expected {expected}"
            )
        self._map = self._open_map()
        logger.info(
            f"Opened device {self.path.name}: {geometry.total_sectors} sectors, "
            f"{geometry.data_set_count} data sets, {geometry.metadata_bytes}B metadata"
        )

    @classmethod
    def create(
        cls,
        path: Path,
        geometry: DeviceGeometry,
        **kwargs
    ) -> "SimDevice":
        """Create a zero-filled backing file and open it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.truncate(geometry.total_sectors * geometry.record_bytes)
        logger.info(f"Created device file {path} ({geometry.total_sectors} sectors)")
        return cls(path, geometry, **kwargs)

    def _open_map(self) -> np.memmap:
        return np.memmap(
            self.path,
            dtype=np.uint8,
            mode="r+",
            shape=(self.geometry.total_sectors, self.geometry.record_bytes),
        )

    def _check_range(self, start: int, count: int) -> None:
        if start < 0 or count < 0 or start + count > self.geometry.total_sectors:
            raise OutOfRangeError(
                f"Sectors [{start}, {start + count}) outside device of {self.geometry.total_sectors}"
            )

    def _delay(self) -> None:
        if self.delay_s:
            time.sleep(self.delay_s)

    @contextmanager
    def undelayed(self) -> Iterator["SimDevice"]:
        """Suspend the fixed per-call delay, e.g. while a benchmark sets up its data."""
        saved, self.delay_s = self.delay_s, 0.0
        try:
            yield self
        finally:
            self.delay_s = saved

    @property
    def crashed(self) -> bool:
        return self._crashed

    def write_sectors(self, start: int, records: Sequence[Record]) -> None:
        """
        Persist consecutive physical sectors with their metadata.

        Args:
            start: First physical sector
            records: (data, metadata) pairs of exactly sector_bytes / metadata_bytes

        Raises:
            OutOfRangeError: If the range leaves the device
            DeviceCrashedError: If the crash point is reached; earlier sectors stay persisted
        """
        geom = self.geometry
        self._check_range(start, len(records))
        self._delay()
        with self._lock:
            for offset, (data, meta) in enumerate(records):
                if len(data) != geom.sector_bytes or len(meta) != geom.metadata_bytes:
                    raise DeviceError(f"Malformed record for sector {start + offset}")
                if self._crashed:
                    raise DeviceCrashedError(f"Device crashed; write to sector {start + offset} dropped")
                if self._crash_after is not None and self.persisted_writes >= self._crash_after:
                    self._crashed = True
                    logger.warning(f"Scheduled crash after {self.persisted_writes} sector writes")
                    raise DeviceCrashedError(f"Device crashed; write to sector {start + offset} dropped")
                row = self._map[start + offset]
                row[:geom.sector_bytes] = np.frombuffer(data, dtype=np.uint8)
                row[geom.sector_bytes:] = np.frombuffer(meta, dtype=np.uint8)
                self.persisted_writes += 1
                if self.tracing:
                    self.trace.append(("W", start + offset))

    def read_sectors(self, start: int, count: int) -> List[Record]:
        """
        Read consecutive physical sectors.

        Returns:
            (data, metadata) pairs as last atomically persisted
        """
        geom = self.geometry
        self._check_range(start, count)
        self._delay()
        with self._lock:
            block = np.array(self._map[start:start + count])
            if self.tracing:
                self.trace.extend(("R", s) for s in range(start, start + count))
        return [
            (row[:geom.sector_bytes].tobytes(), row[geom.sector_bytes:].tobytes())
            for row in block
        ]

    def read_metadata_column(self, start: int, count: int, width: int) -> np.ndarray:
        """Copy the first `width` metadata bytes of a sector range as a (count, width) array."""
        self._check_range(start, count)
        offset = self.geometry.sector_bytes
        with self._lock:
            return np.array(self._map[start:start + count, offset:offset + width])

    def flush(self) -> None:
        """Push the mapping to the backing file."""
        with self._lock:
            self._map.flush()

    def schedule_crash(self, after_writes: int) -> None:
        """Fail every sector write once `after_writes` more sectors have been persisted."""
        with self._lock:
            self._crash_after = self.persisted_writes + after_writes

    def reopen(self) -> None:
        """Simulate a restart: drop the crash state and remap the backing file."""
        with self._lock:
            self._map.flush()
            del self._map
            self._map = self._open_map()
            self._crashed = False
            self._crash_after = None
        logger.info(f"Reopened device {self.path.name}")

    def snapshot(self) -> int:
        """Capture the full device image; returns a handle for restore()."""
        with self._lock:
            handle = next(self._snapshot_ids)
            self._snapshots[handle] = np.array(self._map)
        logger.debug(f"Captured snapshot {handle} of {self.path.name}")
        return handle

    def restore(
        self,
        handle: int,
        sectors: Optional[Iterable[int]] = None,
        region: str = "all"
    ) -> None:
        """
        Restore device content from a snapshot.

        Args:
            handle: Value returned by snapshot()
            sectors: Physical sectors to restore (default: all)
            region: "all", "data" (sector bytes only) or "metadata" (inline metadata only)

        Raises:
            DeviceError: On an unknown handle or region
        """
        if handle not in self._snapshots:
            raise DeviceError(f"Unknown snapshot handle {handle}")
        columns = {
            "all": slice(None),
            "data": slice(0, self.geometry.sector_bytes),
            "metadata": slice(self.geometry.sector_bytes, None),
        }
        if region not in columns:
            raise DeviceError(f"Unknown restore region '{region}'")

        image = self._snapshots[handle]
        rows = slice(None) if sectors is None else np.fromiter(sectors, dtype=np.int64)
        with self._lock:
            self._map[rows, columns[region]] = image[rows, columns[region]]
        logger.debug(f"Restored snapshot {handle} ({region}) on {self.path.name}")

    def drop_snapshot(self, handle: int) -> None:
        self._snapshots.pop(handle, None)

    def flip_bit(self, sector: int, byte_offset: int, bit: int) -> None:
        """Flip one bit of a persisted record in place (tamper harness)."""
        self._check_range(sector, 1)
        with self._lock:
            self._map[sector, byte_offset] ^= np.uint8(1 << bit)

    def close(self) -> None:
        with self._lock:
            self._map.flush()
        self._snapshots.clear()


def hexdump_sector(record: Record, sector: int, width: int = 32) -> str:
    """Render one sector and its metadata as a hex dump."""
    data, meta = record
    lines = [f"sector {sector}: data"]
    for offset in range(0, len(data), width):
        chunk = data[offset:offset + width]
        if not any(chunk):
            continue
        lines.append(f"  {offset:04x}: {chunk.hex(' ')}")
    lines.append(f"sector {sector}: metadata")
    for offset in range(0, len(meta), width):
        lines.append(f"  {offset:04x}: {meta[offset:offset + width].hex(' ')}")
    return "\n".join(lines)
