"""Hazel Merkle Tree: in-memory levels >= 1, per-node locks and the hasher pool."""

import math
import queue
import threading
from typing import Callable, List, Optional, Sequence, Tuple

from .config import TREE_BRANCHING, NODE_BYTES, HASHER_COUNT, SECTOR_BYTES, DATA_SET_SIZE
from .crypto import CipherSuite, DEFAULT_SUITE, inner_hash
from .logger import setup_logger

logger = setup_logger(__name__)


def level_sizes(data_set_count: int, branching: int = TREE_BRANCHING) -> List[int]:
    """Node counts per level, from level 1 (one node per data set) up to the single root."""
    sizes = [data_set_count]
    while sizes[-1] > 1:
        sizes.append(-(-sizes[-1] // branching))
    return sizes


def hmt_memory_bytes(
    capacity_bytes: int,
    data_set_size: int = DATA_SET_SIZE,
    branching: int = TREE_BRANCHING,
    node_bytes: int = NODE_BYTES,
    sector_bytes: int = SECTOR_BYTES
) -> int:
    """
    In-memory size of the tree for a drive, without level 0.

    Args:
        capacity_bytes: Raw drive capacity
        data_set_size: Leaf branching factor (IVs per metadata sector)
        branching: Upper tree branching factor
        node_bytes: Hash width
        sector_bytes: Sector size

    Returns:
        Bytes needed for all levels >= 1
    """
    sectors = capacity_bytes // sector_bytes
    data_sets = math.ceil(sectors / (data_set_size + 1))
    return node_bytes * sum(level_sizes(data_sets, branching))


def rebuild_levels(
    level1: Sequence[bytes],
    branching: int = TREE_BRANCHING,
    suite: CipherSuite = DEFAULT_SUITE
) -> List[List[bytes]]:
    """Recompute every level above level 1 from scratch."""
    levels = [list(level1)]
    while len(levels[-1]) > 1:
        below = levels[-1]
        levels.append([
            inner_hash(below[i:i + branching], suite)
            for i in range(0, len(below), branching)
        ])
    return levels


class HazelMerkleTree:
    """
    Freshness tree with leaf branching S (one level-1 node per data set) and
    tree branching D_t above it.

    Two level-1 views are kept: `current` is updated synchronously on the
    write path and is what reads are verified against; `levels[0]` only
    changes through propagation, so the persisted root reflects exactly the
    writes whose propagation has committed. After a drain both views agree.

    Nodes are numbered globally level by level (level 1 first), and every
    propagation takes node locks in ascending global order.
    """

    def __init__(
        self,
        level1: Sequence[bytes],
        branching: int = TREE_BRANCHING,
        suite: CipherSuite = DEFAULT_SUITE
    ):
        self.branching = branching
        self.suite = suite
        self.levels = rebuild_levels(level1, branching, suite)
        self.current: List[bytes] = list(level1)
        self._offsets = []
        total = 0
        for level in self.levels:
            self._offsets.append(total)
            total += len(level)
        self.node_count = total
        self._locks = [threading.Lock() for _ in range(total)]
        self.lock_trace: Optional[List[Tuple[int, int]]] = None

    @property
    def root(self) -> bytes:
        return self.levels[-1][0]

    @property
    def height(self) -> int:
        return len(self.levels)

    @property
    def data_set_count(self) -> int:
        return len(self.current)

    def memory_bytes(self) -> int:
        return NODE_BYTES * self.node_count

    def global_index(self, level: int, position: int) -> int:
        return self._offsets[level] + position

    def path(self, data_set: int) -> List[Tuple[int, int]]:
        """(level, position) pairs from the data set's level-1 node up to the root."""
        nodes = []
        position = data_set
        for level in range(self.height):
            nodes.append((level, position))
            position //= self.branching
        return nodes

    def _acquire(self, level: int, position: int, last: int) -> int:
        index = self.global_index(level, position)
        assert index > last, f"lock order violation: {index} after {last}"
        self._locks[index].acquire()
        if self.lock_trace is not None:
            self.lock_trace.append((threading.get_ident(), index))
        return index

    def _recompute(self, level: int, position: int) -> bytes:
        below = self.levels[level - 1]
        start = position * self.branching
        return inner_hash(below[start:start + self.branching], self.suite)

    def propagate(
        self,
        data_set: int,
        level1_value: Callable[[], bytes],
        commit: Callable[[bytes], None]
    ) -> bytes:
        """
        Push a data set's committed level-1 node up to the root.

        Locks are coupled hand over hand: a node is written only while the
        lock of its parent is also held, so a parent recomputed under its own
        lock sees stable children, and the root reflects exactly the
        propagations that have committed.

        Args:
            data_set: Data set whose level-1 node changed
            level1_value: Returns the new committed level-1 node; called with
                the level-1 and level-2 locks held
            commit: Persists the new root; called with the root lock held

        Returns:
            The new root
        """
        path = self.path(data_set)
        held = []
        last = -1
        try:
            last = self._acquire(*path[0], last)
            held.append(last)
            for step, (level, position) in enumerate(path):
                if step + 1 < len(path):
                    last = self._acquire(*path[step + 1], last)
                    held.append(last)
                value = level1_value() if level == 0 else self._recompute(level, position)
                self.levels[level][position] = value
                if step + 1 == len(path):
                    commit(value)
                    return value
                self._locks[held.pop(0)].release()
        finally:
            for index in held:
                self._locks[index].release()

    def reset(self, level1: Sequence[bytes]) -> None:
        """Replace both views with a full rebuild (recovery)."""
        self.levels = rebuild_levels(level1, self.branching, self.suite)
        self.current = list(level1)


class HasherPool:
    """
    Fixed set of hasher threads fed round-robin, each from its own queue.

    Tasks are callables; a failing task is logged and its exception kept for
    the next join().
    """

    def __init__(self, size: int = HASHER_COUNT, name: str = "hasher"):
        self.size = size
        self._queues: List[queue.Queue] = [queue.Queue() for _ in range(size)]
        self._next = 0
        self._dispatch_lock = threading.Lock()
        self._errors: List[BaseException] = []
        self._stopping = False
        self._threads = [
            threading.Thread(target=self._run, args=(q,), name=f"{name}-{i}", daemon=True)
            for i, q in enumerate(self._queues)
        ]
        for thread in self._threads:
            thread.start()

    def _run(self, tasks: queue.Queue) -> None:
        while True:
            task = tasks.get()
            try:
                if task is None:
                    return
                if not self._stopping:
                    task()
            except BaseException as e:
                logger.exception("Hasher task failed")
                self._errors.append(e)
            finally:
                tasks.task_done()

    def submit(self, task: Callable[[], None]) -> None:
        with self._dispatch_lock:
            target = self._queues[self._next]
            self._next = (self._next + 1) % self.size
        target.put(task)

    def backlog(self) -> int:
        """Tasks queued or running."""
        return sum(q.unfinished_tasks for q in self._queues)

    def join(self) -> None:
        """
        Wait until every submitted task has finished.

        Raises:
            The first exception raised by a task since the last join
        """
        for q in self._queues:
            q.join()
        if self._errors:
            error = self._errors[0]
            self._errors.clear()
            raise error

    def shutdown(self, wait: bool = True) -> None:
        """Stop the threads; with wait=False queued tasks are dropped."""
        if not wait:
            self._stopping = True
        for q in self._queues:
            q.put(None)
        for thread in self._threads:
            thread.join()
