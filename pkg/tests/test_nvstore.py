"""Unit tests for the NV store and its journal."""

import shutil
import tempfile
import threading
import unittest
from pathlib import Path

from src.exceptions import JournalFullError, SecureStorageError
from src.nvstore import ENTRY_BYTES, HEADER_BYTES, EcJournalEntry, JournalStatus, NvStore


def entries_for(sectors, old=0, new=1):
    return [EcJournalEntry(sector=s, old_iv=old, new_iv=new + s, key_id=0) for s in sectors]


class TestNvStore(unittest.TestCase):
    """Test cases for NvStore."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.path = Path(self.temp_dir) / "nv.bin"
        self.nv = NvStore(self.path, capacity=8)

    def tearDown(self):
        self.nv.close()
        shutil.rmtree(self.temp_dir)

    def test_admit_record_retire(self):
        self.assertIsNone(self.nv.admit([1, 2]))
        entries = entries_for([1, 2])
        self.nv.record(entries)
        self.assertEqual(self.nv.live_count, 2)
        self.assertIs(self.nv.entry_at(1), entries[0])
        self.nv.retire(entries)
        self.assertEqual(self.nv.live_count, 0)
        self.assertEqual(self.nv.free_slots(), 8)
        self.assertEqual(entries[0].status, JournalStatus.RETIRED)

    def test_single_writer_rule(self):
        self.assertIsNone(self.nv.admit([3]))
        self.assertEqual(self.nv.admit([2, 3]), 3)
        self.nv.record(entries_for([3]))
        self.assertEqual(self.nv.admit([3]), 3)
        self.assertIsNone(self.nv.admit([2]))

    def test_release_drops_claim(self):
        self.assertIsNone(self.nv.admit([4]))
        self.nv.release([4])
        self.assertIsNone(self.nv.admit([4]))

    def test_record_requires_admission(self):
        with self.assertRaises(SecureStorageError):
            self.nv.record(entries_for([5]))

    def test_journal_full(self):
        self.assertIsNone(self.nv.admit(list(range(8))))
        with self.assertRaises(JournalFullError):
            self.nv.admit([100])

    def test_status_progression_and_root_commit(self):
        self.nv.admit([1])
        entries = entries_for([1])
        self.nv.record(entries)
        self.nv.mark(entries, JournalStatus.DATA_PERSISTED)
        root = b"\x07" * 16
        self.nv.commit_root(root, entries)
        self.assertEqual(entries[0].status, JournalStatus.TREE_UPDATED)
        self.assertIsNotNone(entries[0].tree_updated_at)
        self.assertEqual(self.nv.root, root)

    def test_committed_image_survives_reopen(self):
        self.nv.admit([1, 9])
        entries = entries_for([1, 9])
        self.nv.record(entries)
        self.nv.mark(entries[:1], JournalStatus.DATA_PERSISTED)
        self.nv.set_root(b"\x05" * 16)

        reopened = NvStore.open(self.path)
        self.addCleanup(reopened.close)
        self.assertEqual(reopened.root, b"\x05" * 16)
        self.assertEqual(reopened.freshness_key, self.nv.freshness_key)
        self.assertEqual(reopened.entry_at(1).status, JournalStatus.DATA_PERSISTED)
        self.assertEqual(reopened.entry_at(9).status, JournalStatus.PENDING)
        self.assertEqual(reopened.entry_at(9).new_iv, 10)
        self.assertEqual(reopened.committed_image(), self.nv.committed_image())

    def test_retire_all(self):
        self.nv.admit([1, 2, 3])
        self.nv.record(entries_for([1, 2, 3]))
        self.nv.retire_all(b"\x01" * 16)
        self.assertEqual(self.nv.live_count, 0)
        reopened = NvStore.from_image(self.nv.committed_image())
        self.assertEqual(reopened.live_count, 0)
        self.assertEqual(reopened.root, b"\x01" * 16)

    def test_bad_image_rejected(self):
        with self.assertRaises(SecureStorageError):
            NvStore.from_image(b"short")
        image = bytearray(self.nv.committed_image())
        image[0:4] = b"XXXX"
        with self.assertRaises(SecureStorageError):
            NvStore.from_image(bytes(image))

    def test_live_in(self):
        self.nv.admit([1, 5, 7])
        self.nv.record(entries_for([1, 5, 7]))
        self.assertEqual(sorted(e.sector for e in self.nv.live_in(range(4, 8))), [5, 7])

    def test_wait_for_wakes_on_commit(self):
        self.nv.admit([2])
        entries = entries_for([2])
        self.nv.record(entries)
        timer = threading.Timer(0.05, lambda: self.nv.commit_root(bytes(16), entries))
        timer.start()
        self.assertTrue(self.nv.wait_for(entries[0], JournalStatus.TREE_UPDATED, timeout=5.0))
        timer.join()

    def test_commit_writes_only_changed_slots(self):
        before = self.nv.commit_bytes
        self.nv.admit([1])
        entries = entries_for([1])
        self.nv.record(entries)
        self.assertEqual(self.nv.commit_bytes - before, HEADER_BYTES + ENTRY_BYTES)

        before = self.nv.commit_bytes
        self.nv.set_root(b"\x02" * 16)
        self.assertEqual(self.nv.commit_bytes - before, HEADER_BYTES)

        self.nv.admit([2, 3])
        self.nv.record(entries_for([2, 3]))
        before = self.nv.commit_bytes
        self.nv.retire(entries)
        self.assertEqual(self.nv.commit_bytes - before, HEADER_BYTES + ENTRY_BYTES)
        self.assertEqual(self.path.read_bytes(), self.nv.committed_image())

        before = self.nv.commit_bytes
        self.nv.retire_all(b"\x03" * 16)
        self.assertEqual(self.nv.commit_bytes - before, HEADER_BYTES + 8 * ENTRY_BYTES)
        self.assertEqual(self.path.read_bytes(), self.nv.committed_image())

    def test_memory_only_store_writes_nothing(self):
        nv = NvStore(capacity=4)
        nv.admit([1])
        nv.record(entries_for([1]))
        self.assertEqual(nv.commit_bytes, 0)
        nv.close()

    def test_wait_free_wakes_on_retire(self):
        self.nv.admit(list(range(8)))
        entries = entries_for(range(8))
        self.nv.record(entries)
        self.assertFalse(self.nv.wait_free(1, timeout=0.01))
        timer = threading.Timer(0.05, lambda: self.nv.retire(entries[:2]))
        timer.start()
        self.assertTrue(self.nv.wait_free(2, timeout=5.0))
        timer.join()
        self.assertEqual(self.nv.free_slots(), 2)

    def test_wait_unclaimed(self):
        self.nv.admit([6])
        timer = threading.Timer(0.05, lambda: self.nv.release([6]))
        timer.start()
        self.assertTrue(self.nv.wait_unclaimed(6, timeout=5.0))
        timer.join()
        self.assertTrue(self.nv.wait_unclaimed(6, timeout=0.01))


if __name__ == '__main__':
    unittest.main()
