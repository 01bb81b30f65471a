"""Benchmark driver: seeded workloads against a stack in one of the three modes."""

import shutil
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import blake3
import numpy as np
import pandas as pd

from .config import SECTOR_BYTES, StackConfig
from .exceptions import BenchmarkError, ConfigError, SecureStorageError
from .export import results_frame
from .logger import setup_logger
from .stack import SecureStack
from .workload import Op, WorkloadSpec, check_payload, generate_ops, make_block, parse_size

logger = setup_logger(__name__)

PREFILL_CHUNK_SECTORS = 64
PERCENTILES = (50.0, 90.0, 99.0, 99.9)

# CLI-style axis names accepted by sweep()
AXIS_ALIASES = {
    "qd": "queue_depth",
    "bs": "block_bytes",
    "block": "block_bytes",
}


@dataclass
class SlotStats:
    """Accumulator owned by one issuing thread; merged after the run."""

    latencies_us: List[float] = field(default_factory=list)
    bytes: int = 0
    failures: List[str] = field(default_factory=list)


def trace_digest(ops: Sequence[Op]) -> str:
    """Digest of the logical op sequence; equal seeds give equal digests."""
    h = blake3.blake3()
    for op in ops:
        h.update(f"{op.kind}:{op.lba}:{op.count};".encode())
    return h.hexdigest()[:32]


def _working_sectors(spec: WorkloadSpec, stack: SecureStack) -> int:
    size = stack.config.device.data_set_size
    available = stack.data_sectors
    if spec.working_sectors is not None:
        if spec.working_sectors > available:
            raise ConfigError(f"Working set of {spec.working_sectors} sectors exceeds {available} data sectors")
        return spec.working_sectors
    # whole data sets only, so pollution maps cleanly onto read sectors
    whole = (available // size) * size
    return whole if whole >= spec.block_sectors else available


def prefill(stack: SecureStack, working: int, version: int = 0) -> None:
    """Write every working sector once and bring all freshness tags up to date."""
    for lba in range(0, working, PREFILL_CHUNK_SECTORS):
        count = min(PREFILL_CHUNK_SECTORS, working - lba)
        stack.write(lba, make_block(lba, count, version))
    stack.drain()
    stack.refresh()
    logger.info(f"Prefilled {working} sectors")


def pollute(stack: SecureStack, working: int, fraction: float, seed: int) -> List[int]:
    """
    Rewrite one sector in a seeded fraction of the working data sets.

    Every other sector of a polluted data set keeps a tag computed under the
    old level-1 node, so reads of it take the full path.

    Returns:
        The polluted data sets
    """
    size = stack.config.device.data_set_size
    sets = working // size
    chosen = round(fraction * sets)
    if chosen == 0:
        return []
    rng = np.random.default_rng(seed + 1)
    polluted = sorted(int(ds) for ds in rng.choice(sets, size=chosen, replace=False))
    for ds in polluted:
        lba = ds * size
        stack.write(lba, make_block(lba, 1, 1))
    stack.drain()
    logger.info(f"Polluted {chosen} of {sets} data sets")
    return polluted


def _issue(stack: SecureStack, ops: Sequence[Op], deadline: Optional[float], stats: SlotStats) -> None:
    for op in ops:
        if deadline is not None and time.perf_counter() >= deadline:
            return
        t0 = time.perf_counter()
        try:
            if op.kind == "R":
                data = stack.read(op.lba, op.count)
                size = len(data) // op.count
                for k in range(op.count):
                    if not check_payload(op.lba + k, data[k * size:(k + 1) * size]):
                        stats.failures.append(f"sector {op.lba + k} returned unexpected content")
            else:
                stack.write(op.lba, make_block(op.lba, op.count, op.version))
        except SecureStorageError as e:
            stats.failures.append(f"{op.kind} {op.lba}+{op.count}: {type(e).__name__}: {e}")
            return
        stats.latencies_us.append((time.perf_counter() - t0) * 1e6)
        stats.bytes += op.count * SECTOR_BYTES


def _delta(after: Dict[str, Any], before: Dict[str, Any], key: str) -> int:
    return int(after.get(key, 0)) - int(before.get(key, 0))


def _rate(part: int, whole: int) -> float:
    return part / whole if whole else 0.0


def _ack_before_tree(stack: SecureStack) -> float:
    trace = stack.remote.journal_trace if stack.remote is not None else None
    if not trace:
        return 0.0
    done = [e for e in trace if e.tree_updated_at is not None and e.acked_at is not None]
    return _rate(sum(1 for e in done if e.acked_at < e.tree_updated_at), len(done))


def run(
    spec: WorkloadSpec,
    config: StackConfig = StackConfig(),
    workdir: Optional[Path] = None
) -> Dict[str, Any]:
    """
    Execute one workload and return its result row.

    Args:
        spec: Workload parameters
        config: Stack configuration; spec.ec overrides eventual consistency
        workdir: Directory for the device and NV files; a temporary one by default

    Returns:
        Result row keyed by the columns of export.RESULT_COLUMNS

    Raises:
        ConfigError: If the workload does not fit the device
        BenchmarkError: If any operation fails or returns unexpected content
    """
    temporary = workdir is None
    workdir = Path(tempfile.mkdtemp(prefix="snvme-bench-")) if temporary else Path(workdir)
    logger.info(f"Starting run: {spec}")
    stack = SecureStack(config, spec.mode, workdir, ec=spec.ec).build()
    try:
        working = _working_sectors(spec, stack)
        ops = generate_ops(spec, working)
        # setup runs at full speed; only the measured phase sees the device delay
        with stack.device.undelayed():
            if any(op.kind == "R" for op in ops):
                prefill(stack, working)
            if spec.pollution and spec.mode == "freshness":
                pollute(stack, working, spec.pollution, spec.seed)

        if stack.remote is not None and stack.remote.freshness:
            stack.remote.journal_trace = []
        before = stack.metrics()

        slots = spec.workers * spec.queue_depth
        stats = [SlotStats() for _ in range(slots)]
        start = time.perf_counter()
        deadline = start + spec.duration_s if spec.duration_s else None
        with ThreadPoolExecutor(max_workers=slots, thread_name_prefix="bench") as pool:
            futures = [pool.submit(_issue, stack, ops[s::slots], deadline, stats[s]) for s in range(slots)]
            for future in futures:
                future.result()
        elapsed = time.perf_counter() - start

        after = stack.metrics()
        failures = [f for s in stats for f in s.failures]
        if failures:
            logger.error(f"Run failed verification: {len(failures)} failures, first: {failures[0]}")
            raise BenchmarkError(f"{len(failures)} verification failures, first: {failures[0]}")
        stack.drain()

        latencies = np.concatenate([np.asarray(s.latencies_us, dtype=float) for s in stats])
        if latencies.size:
            pcts = np.percentile(latencies, PERCENTILES)
        else:
            pcts = np.zeros(len(PERCENTILES))
        done = int(latencies.size)
        moved = sum(s.bytes for s in stats)
        fast = _delta(after, before, "fast_path")
        full = _delta(after, before, "full_path")
        hits = _delta(after, before, "cache_hits")
        misses = _delta(after, before, "cache_misses")

        row = {
            "label": spec.label,
            "pattern": spec.pattern,
            "mode": spec.mode,
            "ec": "on" if spec.ec else "off",
            "block_bytes": spec.block_bytes,
            "queue_depth": spec.queue_depth,
            "workers": spec.workers,
            "pollution": spec.pollution,
            "seed": spec.seed,
            "ops": done,
            "bytes": moved,
            "elapsed_s": elapsed,
            "throughput_bps": moved / elapsed if elapsed else 0.0,
            "iops": done / elapsed if elapsed else 0.0,
            "lat_p50_us": float(pcts[0]),
            "lat_p90_us": float(pcts[1]),
            "lat_p99_us": float(pcts[2]),
            "lat_p999_us": float(pcts[3]),
            "fast_path": fast,
            "full_path": full,
            "fast_path_rate": _rate(fast, fast + full),
            "full_path_rate": _rate(full, fast + full),
            "cache_hit_rate": _rate(hits, hits + misses),
            "hasher_backlog": int(after.get("hasher_backlog", 0)),
            "max_hasher_backlog": int(after.get("max_hasher_backlog", 0)),
            "ack_before_tree": _ack_before_tree(stack),
            "trace_digest": trace_digest(ops),
        }
        logger.info(
            f"Finished run: {done} ops, {row['iops']:.0f} IOPS, "
            f"p99 {row['lat_p99_us']:.0f}us, full path {row['full_path_rate']:.2%}"
        )
        return row
    finally:
        stack.close()
        if temporary:
            shutil.rmtree(workdir, ignore_errors=True)


def _axis_field(axis: str) -> str:
    name = AXIS_ALIASES.get(axis, axis)
    if name not in {f.name for f in fields(WorkloadSpec)} or name == "label":
        raise ConfigError(f"Unknown sweep axis '{axis}'")
    return name


def _coerce(name: str, value: Any) -> Any:
    if not isinstance(value, str):
        return value
    if name == "block_bytes":
        return parse_size(value)
    if name == "ec":
        return value.lower() in ("on", "true", "1", "yes")
    if name in ("pollution", "read_fraction", "duration_s"):
        return float(value)
    if name in ("queue_depth", "workers", "ops", "seed", "working_sectors"):
        return int(value)
    return value


def sweep(
    axis: str,
    values: Sequence[Any],
    spec: WorkloadSpec,
    config: StackConfig = StackConfig()
) -> pd.DataFrame:
    """
    Run one workload per value of an axis.

    Args:
        axis: WorkloadSpec field (or qd / bs) to vary
        values: Values for the axis; strings are parsed like CLI flags
        spec: Base workload
        config: Stack configuration

    Returns:
        One row per value, in the given order
    """
    name = _axis_field(axis)
    rows = []
    for value in values:
        point = replace(spec, **{name: _coerce(name, value)}, label=f"{axis}={value}")
        rows.append(run(point, config))
    logger.info(f"Sweep over {axis}: {len(rows)} runs")
    return results_frame(rows)
