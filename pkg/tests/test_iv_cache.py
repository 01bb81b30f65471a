"""Unit tests for the IV cache."""

import threading
import unittest

import numpy as np

from src.iv_cache import IvCache


class FakeMetadataStore:
    """Metadata sectors kept in a dict, with call logs."""

    def __init__(self, size: int = 4):
        self.size = size
        self.sectors = {}
        self.loads = []
        self.stores = []
        self.flushed = []
        self.fail_on = set()

    def load(self, data_set: int) -> np.ndarray:
        self.loads.append(data_set)
        if data_set in self.fail_on:
            raise ValueError(f"bad sector {data_set}")
        return self.sectors.get(data_set, np.zeros(self.size, dtype="<u8")).copy()

    def store(self, data_set: int, ivs: np.ndarray) -> None:
        self.stores.append(data_set)
        self.sectors[data_set] = ivs.copy()

    def on_flushed(self, data_set: int, ivs: np.ndarray) -> None:
        self.flushed.append((data_set, ivs.tolist()))


class TestIvCache(unittest.TestCase):
    """Test cases for IvCache."""

    def setUp(self):
        self.store = FakeMetadataStore()
        self.cache = IvCache(self.store.load, self.store.store, capacity=2, on_flushed=self.store.on_flushed)

    def write(self, data_set: int, offset: int, iv: int) -> None:
        with self.cache.locked(data_set) as line:
            line.iv_array[offset] = iv
            line.dirty = True

    def test_hit_and_miss_counts(self):
        with self.cache.locked(0):
            pass
        with self.cache.locked(0):
            pass
        self.assertEqual((self.cache.hits, self.cache.misses), (1, 1))
        self.assertEqual(self.store.loads, [0])

    def test_lru_eviction_writes_back_dirty_line(self):
        self.write(0, 1, 5)
        with self.cache.locked(1):
            pass
        with self.cache.locked(0):
            pass  # 0 is now most recent
        with self.cache.locked(2):
            pass  # evicts 1, which is clean
        self.assertNotIn(1, self.cache)
        self.assertEqual(self.store.stores, [])
        with self.cache.locked(3):
            pass  # evicts 0, which is dirty
        self.assertEqual(self.store.stores, [0])
        self.assertEqual(self.store.sectors[0].tolist(), [0, 5, 0, 0])
        self.assertEqual(self.store.flushed, [(0, [0, 5, 0, 0])])
        self.assertEqual(self.cache.evictions, 2)

    def test_flush_and_dirty_state(self):
        self.write(1, 0, 9)
        self.assertTrue(self.cache.is_dirty(1))
        self.assertEqual(self.cache.dirty_count(), 1)
        self.cache.flush(1)
        self.assertFalse(self.cache.is_dirty(1))
        self.assertEqual(self.cache.writebacks, 1)
        self.cache.flush(1)
        self.assertEqual(self.cache.writebacks, 1)

    def test_flush_all(self):
        self.write(0, 0, 1)
        self.write(1, 0, 2)
        self.assertEqual(self.cache.flush_all(), 2)
        self.assertEqual(self.cache.dirty_count(), 0)

    def test_loader_failure_is_not_cached(self):
        self.store.fail_on.add(3)
        with self.assertRaises(ValueError):
            with self.cache.locked(3):
                pass
        self.assertNotIn(3, self.cache)
        self.store.fail_on.clear()
        with self.cache.locked(3) as line:
            self.assertEqual(line.iv_array.tolist(), [0, 0, 0, 0])

    def test_clear_drops_without_write_back(self):
        self.write(0, 0, 1)
        self.cache.clear()
        self.assertEqual(len(self.cache), 0)
        self.assertEqual(self.store.stores, [])

    def test_write_back_runs_without_the_structure_lock(self):
        held = []

        def store(data_set: int, ivs: np.ndarray) -> None:
            held.append(cache._lock.locked())
            self.store.store(data_set, ivs)

        cache = IvCache(self.store.load, store, capacity=1)
        with cache.locked(0) as line:
            line.dirty = True
        with cache.locked(1) as line:
            line.dirty = True
        cache.flush(1)
        self.assertEqual(self.store.stores, [0, 1])
        self.assertEqual(held, [False, False])

    def test_reload_waits_for_eviction_in_flight(self):
        started, release = threading.Event(), threading.Event()

        def store(data_set: int, ivs: np.ndarray) -> None:
            if data_set == 0:
                started.set()
                release.wait(5.0)
            self.store.store(data_set, ivs)

        cache = IvCache(self.store.load, store, capacity=2)
        with cache.locked(0) as line:
            line.iv_array[1] = 7
            line.dirty = True
        with cache.locked(1):
            pass

        seen = []

        def reload() -> None:
            with cache.locked(0) as line:
                seen.append(line.iv_array.tolist())

        evicting = threading.Thread(target=self._touch, args=(cache, 2))
        evicting.start()
        self.assertTrue(started.wait(5.0))
        self.assertTrue(cache.is_dirty(0))
        reloading = threading.Thread(target=reload)
        reloading.start()
        reloading.join(0.1)
        self.assertTrue(reloading.is_alive())
        self.assertEqual(self.store.loads.count(0), 1)

        release.set()
        evicting.join()
        reloading.join()
        self.assertEqual(seen, [[0, 7, 0, 0]])
        self.assertEqual(self.store.loads.count(0), 2)
        self.assertFalse(cache.is_dirty(0))

    @staticmethod
    def _touch(cache: IvCache, data_set: int) -> None:
        with cache.locked(data_set):
            pass

    def test_concurrent_increments_are_not_lost(self):
        cache = IvCache(self.store.load, self.store.store, capacity=1)

        def worker(data_set: int):
            for _ in range(200):
                with cache.locked(data_set) as line:
                    line.iv_array[0] += 1
                    line.dirty = True

        threads = [threading.Thread(target=worker, args=(ds % 3,)) for ds in range(6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        cache.flush_all()
        for ds in range(3):
            self.assertEqual(int(self.store.sectors[ds][0]), 400)


if __name__ == '__main__':
    unittest.main()
