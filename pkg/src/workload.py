"""Seeded workload generation and self-describing sector payloads."""

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np

from .config import SECTOR_BYTES
from .exceptions import ConfigError
from .logger import setup_logger

logger = setup_logger(__name__)

PATTERNS = ("seq-read", "rand-read", "seq-write", "rand-write", "mixed")
MODES = ("baremetal", "integrity", "freshness")
MIN_BLOCK_BYTES = SECTOR_BYTES
MAX_BLOCK_BYTES = 1024 * 1024

_WORDS = SECTOR_BYTES // 8
_WORD_INDEX = np.arange(_WORDS, dtype=np.uint64)
_MIX = np.uint64(0x9E3779B97F4A7C15)


def parse_size(text: str) -> int:
    """Parse sizes such as '4k', '64K', '1m' or '8192' into bytes."""
    units = {"k": 1024, "m": 1024**2, "g": 1024**3}
    value = text.strip().lower().rstrip("ib")
    try:
        if value and value[-1] in units:
            return int(float(value[:-1]) * units[value[-1]])
        return int(value)
    except ValueError as e:
        raise ConfigError(f"Invalid size '{text}'") from e


@dataclass(frozen=True)
class WorkloadSpec:
    """One benchmark configuration; the op sequence is a pure function of it."""

    pattern: str = "rand-read"
    block_bytes: int = 4096
    queue_depth: int = 1
    workers: int = 1
    ops: int = 1000
    duration_s: Optional[float] = None
    mode: str = "freshness"
    ec: bool = True
    pollution: float = 0.0
    seed: int = 7
    working_sectors: Optional[int] = None
    read_fraction: float = 0.5
    label: str = field(default="", compare=False)

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ConfigError(f"Unknown pattern '{self.pattern}', expected one of {PATTERNS}")
        if self.mode not in MODES:
            raise ConfigError(f"Unknown mode '{self.mode}', expected one of {MODES}")
        if self.block_bytes % SECTOR_BYTES or not MIN_BLOCK_BYTES <= self.block_bytes <= MAX_BLOCK_BYTES:
            raise ConfigError(f"Block size {self.block_bytes} must be a multiple of 4KiB up to 1MiB")
        if self.queue_depth < 1 or self.workers < 1 or self.ops < 1:
            raise ConfigError("queue_depth, workers and ops must be positive")
        if not 0.0 <= self.pollution <= 1.0:
            raise ConfigError(f"Pollution fraction {self.pollution} is outside [0, 1]")
        if not 0.0 <= self.read_fraction <= 1.0:
            raise ConfigError(f"Read fraction {self.read_fraction} is outside [0, 1]")

    @property
    def block_sectors(self) -> int:
        return self.block_bytes // SECTOR_BYTES

    @property
    def is_read(self) -> bool:
        return self.pattern.endswith("read")


class Op(NamedTuple):
    kind: str  # "R" or "W"
    lba: int
    count: int
    version: int


def generate_ops(spec: WorkloadSpec, working_sectors: int) -> List[Op]:
    """
    Build the deterministic operation list of a workload.

    Args:
        spec: Workload parameters
        working_sectors: Data sectors the workload may touch

    Returns:
        Ops in issue order; write versions number the writes from 1

    Raises:
        ConfigError: If one block does not fit the working set
    """
    count = spec.block_sectors
    if working_sectors < count:
        raise ConfigError(f"Working set of {working_sectors} sectors is smaller than one block")
    rng = np.random.default_rng(spec.seed)
    slots = working_sectors // count

    if spec.pattern.startswith("seq"):
        lbas = (np.arange(spec.ops) % slots) * count
    else:
        lbas = rng.integers(0, slots, size=spec.ops) * count

    if spec.pattern == "mixed":
        kinds = np.where(rng.random(spec.ops) < spec.read_fraction, "R", "W")
    else:
        kinds = np.full(spec.ops, "R" if spec.is_read else "W")

    ops = []
    version = 0
    for kind, lba in zip(kinds.tolist(), lbas.tolist()):
        if kind == "W":
            version += 1
        ops.append(Op(kind, int(lba), count, version if kind == "W" else 0))
    logger.debug(f"Generated {len(ops)} ops for {spec.pattern} ({version} writes)")
    return ops


def make_payload(sector: int, version: int) -> bytes:
    """One sector whose content identifies its sector index and write version."""
    seed = np.uint64((sector * 0x100000001B3 + version) & (2**64 - 1))
    with np.errstate(over="ignore"):
        words = (_WORD_INDEX + seed) * _MIX
    words[0] = np.uint64(sector)
    words[1] = np.uint64(version)
    return words.astype("<u8").tobytes()


def make_block(lba: int, count: int, version: int) -> bytes:
    return b"".join(make_payload(lba + k, version) for k in range(count))


def check_payload(sector: int, data: bytes) -> bool:
    """
    True when a sector holds the payload written for it, or zeros if never written.
    """
    if not any(data):
        return True
    header = np.frombuffer(data[:16], dtype="<u8")
    if int(header[0]) != sector:
        return False
    return data == make_payload(sector, int(header[1]))
