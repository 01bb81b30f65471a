"""Sliding-window anti-replay check for network counters."""

import threading

from .config import WINDOW_SIZE, NET_COUNTER_BITS
from .logger import setup_logger

logger = setup_logger(__name__)


class ReplayWindow:
    """
    Accepts each counter at most once, and only if it is less than T behind the
    highest counter seen so far.

    Bit k of the bitmap records whether max_seen - k has been accepted.
    """

    def __init__(self, start_counter: int, size: int = WINDOW_SIZE):
        """
        Args:
            start_counter: The peer's random start counter; it is the first value accepted
            size: Window size T
        """
        if size < 1:
            raise ValueError("Window size must be positive")
        self.size = size
        self.max_seen = start_counter - 1
        self._bitmap = 0
        self._mask = (1 << size) - 1
        self._lock = threading.Lock()
        self.accepted = 0
        self.rejected = 0

    def check(self, counter: int) -> bool:
        """
        Accept or reject a counter; only an accepted counter changes the state.

        Returns:
            True if the counter is fresh
        """
        if not 0 <= counter < 2**NET_COUNTER_BITS:
            self.rejected += 1
            return False
        with self._lock:
            if counter > self.max_seen:
                shift = counter - self.max_seen
                self._bitmap = ((self._bitmap << shift) | 1) & self._mask if shift < self.size else 1
                self.max_seen = counter
                self.accepted += 1
                return True

            behind = self.max_seen - counter
            if behind >= self.size or (self._bitmap >> behind) & 1:
                self.rejected += 1
                logger.debug(f"Window rejected counter {counter} (max {self.max_seen})")
                return False

            self._bitmap |= 1 << behind
            self.accepted += 1
            return True
