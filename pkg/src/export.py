"""Export of benchmark results as CSV tables and JSON reports."""

import json
from pathlib import Path
from typing import Any, Dict, Iterable

import pandas as pd

from .exceptions import ExportError
from .logger import setup_logger

logger = setup_logger(__name__)

# Column order of every results table; documented in docs/formats.md.
RESULT_COLUMNS = [
    "label",
    "pattern",
    "mode",
    "ec",
    "block_bytes",
    "queue_depth",
    "workers",
    "pollution",
    "seed",
    "ops",
    "bytes",
    "elapsed_s",
    "throughput_bps",
    "iops",
    "lat_p50_us",
    "lat_p90_us",
    "lat_p99_us",
    "lat_p999_us",
    "fast_path",
    "full_path",
    "fast_path_rate",
    "full_path_rate",
    "cache_hit_rate",
    "hasher_backlog",
    "max_hasher_backlog",
    "ack_before_tree",
    "trace_digest",
]


def results_frame(rows: Iterable[Dict[str, Any]]) -> pd.DataFrame:
    """
    Build a results table with the standard column order.

    Columns missing from a row are left empty; unknown keys are appended
    after the standard columns.
    """
    df = pd.DataFrame(list(rows))
    extra = [c for c in df.columns if c not in RESULT_COLUMNS]
    return df.reindex(columns=RESULT_COLUMNS + extra)


def export_results_csv(
    df: pd.DataFrame,
    output_path: Path,
    append: bool = False
) -> Path:
    """
    Write a results table to CSV.

    Args:
        df: Results table
        output_path: Destination file
        append: Add rows to an existing file instead of replacing it

    Returns:
        Path to the written file

    Raises:
        ExportError: If the file cannot be written
    """
    output_path = Path(output_path)
    logger.info(f"Exporting {len(df)} result rows to {output_path}")
    try:
        output_path.parent.mkdir(parents=True, exist_ok=True)
        exists = append and output_path.exists()
        df.to_csv(output_path, index=False, mode="a" if exists else "w", header=not exists)
        return output_path
    except OSError as e:
        error_msg = f"Failed to export results to {output_path}: {e}"
        logger.error(error_msg)
        raise ExportError(error_msg) from e


def export_results_json(df: pd.DataFrame, output_path: Path) -> Path:
    output_path = Path(output_path)
    try:
        output_path.parent.mkdir(parents=True, exist_ok=True)
        df.to_json(output_path, orient="records", indent=2)
        logger.info(f"Exported {len(df)} result rows to {output_path}")
        return output_path
    except (OSError, ValueError) as e:
        error_msg = f"Failed to export results to {output_path}: {e}"
        logger.error(error_msg)
        raise ExportError(error_msg) from e


def export_run_report(report: Dict[str, Any], output_path: Path) -> Path:
    """Write a free-form run report (engine counters, configuration) as JSON."""
    output_path = Path(output_path)
    try:
        output_path.parent.mkdir(parents=True, exist_ok=True)
        with open(output_path, "w") as f:
            json.dump(report, f, indent=2, default=str)
        logger.info(f"Exported run report to {output_path}")
        return output_path
    except (OSError, TypeError) as e:
        error_msg = f"Failed to export run report: {e}"
        logger.error(error_msg)
        raise ExportError(error_msg) from e
