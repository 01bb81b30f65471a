"""Logging configuration for the secure storage stack."""

import logging
import sys
import threading
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .config import LOG_LEVEL, LOG_FORMAT, LOG_FILE

# one console + file pair per (log file, format), shared by all module loggers
_handlers: Dict[Tuple[Path, str], List[logging.Handler]] = {}
_handlers_lock = threading.Lock()


def _level(name: str) -> int:
    level = logging.getLevelName(name.upper())
    if not isinstance(level, int):
        raise ValueError(f"Unknown log level '{name}'")
    return level


def _shared_handlers(log_file: Path, log_format: str, level: int) -> List[logging.Handler]:
    key = (Path(log_file), log_format)
    with _handlers_lock:
        if key not in _handlers:
            formatter = logging.Formatter(log_format)
            console = logging.StreamHandler(sys.stdout)
            file_handler = logging.FileHandler(log_file)
            for handler in (console, file_handler):
                handler.setLevel(level)
                handler.setFormatter(formatter)
            _handlers[key] = [console, file_handler]
        return _handlers[key]


def setup_logger(
    name: str,
    log_file: Optional[Path] = None,
    level: str = LOG_LEVEL,
    log_format: str = LOG_FORMAT
) -> logging.Logger:
    """
    Get a module logger writing to the console and to the log file.

    Args:
        name: Logger name, normally the module's __name__
        log_file: Log file (default: config.LOG_FILE)
        level: Level name (default: config.LOG_LEVEL)
        log_format: Log message format

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)
    numeric = _level(level)
    logger.setLevel(numeric)
    if not logger.handlers:
        for handler in _shared_handlers(log_file or LOG_FILE, log_format, numeric):
            logger.addHandler(handler)
        logger.propagate = False
    return logger


def set_level(level: str) -> None:
    """Change the level of every logger and handler created through setup_logger."""
    numeric = _level(level)
    with _handlers_lock:
        for handlers in _handlers.values():
            for handler in handlers:
                handler.setLevel(numeric)
    for name in list(logging.root.manager.loggerDict):
        if name.startswith("src") or name == "__main__":
            logging.getLogger(name).setLevel(numeric)
