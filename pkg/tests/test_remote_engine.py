"""Unit tests for the remote engine: freshness checks, eventual consistency and recovery."""

import random
import shutil
import tempfile
import threading
import unittest
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from src.config import DeviceConfig, LocalConfig, RemoteConfig, StackConfig
from src.exceptions import (
    FreshnessError,
    FreshnessViolationError,
    GeometryError,
    IntegrityError,
    SecureStorageError,
)
from src.layout import data_to_physical
from src.local_engine import ReadRequest
from src.nvstore import JournalStatus
from src.stack import DEVICE_ID, SecureStack
from src.workload import check_payload, make_block, make_payload

SMALL = StackConfig(
    device=DeviceConfig(total_sectors=1024, data_set_size=16),
    remote=RemoteConfig(journal_capacity=64, cache_capacity=8),
    local=LocalConfig(lease_units=4096, lease_watermark=256),
)
LEGACY = StackConfig(
    device=DeviceConfig(total_sectors=1024, metadata_bytes=16, data_set_size=16),
    remote=SMALL.remote,
    local=SMALL.local,
)

FRESHNESS_TAG_OFFSET = 4096 + 28


def version_of(data: bytes) -> int:
    return int.from_bytes(data[8:16], "little")


class StackTestCase(unittest.TestCase):
    config = SMALL
    mode = "freshness"
    ec = True

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.stacks = []
        self.stack = self.make_stack("main")

    def tearDown(self):
        for stack in self.stacks:
            stack.close()
        shutil.rmtree(self.temp_dir)

    def make_stack(self, name: str, **kwargs) -> SecureStack:
        options = dict(config=self.config, mode=self.mode, ec=self.ec)
        options.update(kwargs)
        stack = SecureStack(workdir=Path(self.temp_dir) / name, **options).build()
        self.stacks.append(stack)
        return stack

    def physical(self, sector: int) -> int:
        return data_to_physical(sector, self.stack.geometry)

    def counter(self, key: str) -> int:
        return self.stack.metrics().get(key, 0)


class TestFreshnessReadWrite(StackTestCase):
    """Test cases for the verified read and write paths."""

    def test_round_trip_across_data_sets(self):
        block = make_block(10, 40, 1)
        self.assertEqual(self.stack.write(10, block), 40)
        self.assertEqual(self.stack.read(10, 40), block)
        self.assertEqual(self.stack.read(12, 1), make_payload(12, 1))

    def test_unwritten_sectors_read_as_zero(self):
        self.stack.write(0, make_block(0, 2, 1))
        result = self.stack.local.read(ReadRequest(DEVICE_ID, 0, 4))
        self.assertEqual(result.data[2 * 4096:], bytes(2 * 4096))
        self.assertEqual(result.unwritten, [2, 3])
        self.assertEqual(self.counter("unwritten_reads"), 2)

    def test_out_of_range(self):
        last = self.stack.data_sectors
        with self.assertRaises(GeometryError):
            self.stack.read(last - 1, 2)
        with self.assertRaises(GeometryError):
            self.stack.write(last, make_block(last, 1, 1))

    def test_overwrite_returns_latest(self):
        for version in range(1, 6):
            self.stack.write(5, make_block(5, 3, version))
        self.assertEqual(self.stack.read(5, 3), make_block(5, 3, 5))

    def test_drain_matches_full_rebuild(self):
        rng = random.Random(3)
        remote = self.stack.remote
        self.assertEqual(remote.config.hasher_count, 3)
        for version in range(1, 10**4 + 1):
            lba = rng.randrange(self.stack.data_sectors - 8)
            self.stack.write(lba, make_block(lba, rng.randint(1, 8), version))
        self.assertEqual(self.stack.drain(), 0)
        self.assertEqual(remote.tree.levels, remote.rebuild_from_disk())
        self.assertEqual(remote.tree.current, remote.tree.levels[0])
        self.assertEqual(remote.nv.root, remote.tree.root)
        self.assertEqual(remote.metrics()["journal_live"], 0)

    def test_eventual_consistency_does_not_change_the_root(self):
        inline = self.make_stack("inline", ec=False)
        self.assertIsNone(inline.remote.hashers)
        for stack in (self.stack, inline):
            for version in range(1, 40):
                lba = (version * 37) % 900
                stack.write(lba, make_block(lba, 4, version))
            stack.drain()
        self.assertEqual(self.stack.remote.tree.root, inline.remote.tree.root)
        self.assertEqual(inline.metrics()["max_hasher_backlog"], 0)

    def test_concurrent_writes_to_one_sector_serialize(self):
        remote = self.stack.remote
        remote.journal_trace = []

        def writer(thread: int) -> None:
            for k in range(25):
                self.stack.write(5, make_block(5, 1, thread * 100 + k + 1))

        with ThreadPoolExecutor(max_workers=4) as pool:
            for future in [pool.submit(writer, t) for t in range(4)]:
                future.result()
        self.stack.drain()

        # every write must have replaced the IV the previous one left behind
        by_old = {}
        for entry in remote.journal_trace:
            self.assertEqual(entry.sector, 5)
            self.assertNotIn(entry.old_iv, by_old)
            by_old[entry.old_iv] = entry
        iv, chain = 0, 0
        while iv in by_old:
            iv = by_old[iv].new_iv
            chain += 1
        self.assertEqual(chain, 100)

        _, meta = self.stack.device.read_sectors(self.physical(5), 1)[0]
        self.assertEqual(int.from_bytes(meta[:8], "little"), iv)
        data = self.stack.read(5, 1)
        self.assertTrue(check_payload(5, data))
        self.assertIn(version_of(data) // 100, range(4))
        self.assertEqual(remote.tree.levels, remote.rebuild_from_disk())

    def test_background_flushes_retire_the_journal(self):
        stack = self.make_stack(
            "roomy-cache",
            config=StackConfig(
                device=SMALL.device,
                remote=RemoteConfig(journal_capacity=64, cache_capacity=128),
                local=SMALL.local,
            ),
        )
        rng = random.Random(8)
        for version in range(1, 401):
            lba = rng.randrange(stack.data_sectors)
            stack.write(lba, make_block(lba, 1, version))
        metrics = stack.metrics()
        self.assertGreater(metrics.get("background_flushes", 0), 0)
        self.assertEqual(metrics["cache_evictions"], 0)
        self.assertLessEqual(metrics["journal_live"], 64)
        self.assertEqual(stack.drain(), 0)
        self.assertEqual(stack.remote.tree.levels, stack.remote.rebuild_from_disk())

    def test_journal_wraps_under_load(self):
        for version in range(1, 30):
            self.stack.write(0, make_block(0, 48, version))
        self.stack.drain()
        self.assertEqual(self.stack.read(0, 48), make_block(0, 48, 29))
        self.assertEqual(self.stack.remote.nv.live_count, 0)


class TestFreshnessAttacks(StackTestCase):
    """Test cases for tampering and rollback on the device."""

    def setUp(self):
        super().setUp()
        self.stack.write(0, make_block(0, 32, 1))
        self.stack.drain()
        self.stack.refresh()

    def test_rolled_back_sector_is_detected(self):
        handle = self.stack.device.snapshot()
        self.stack.write(3, make_block(3, 1, 2))
        self.stack.drain()
        self.stack.device.restore(handle, sectors=[self.physical(3)])
        with self.assertRaises(FreshnessError) as ctx:
            self.stack.read(3, 1)
        self.assertEqual(ctx.exception.sector, 3)
        self.assertEqual(self.stack.read(4, 1), make_payload(4, 1))

    def test_rolled_back_data_set_is_detected(self):
        handle = self.stack.device.snapshot()
        self.stack.write(3, make_block(3, 1, 2))
        self.stack.drain()
        self.stack.remote.cache.clear()
        self.stack.device.restore(handle, sectors=[0, self.physical(3)])
        with self.assertRaises(FreshnessError):
            self.stack.read(3, 1)

    def test_tampered_ciphertext_fails_integrity(self):
        self.stack.device.flip_bit(self.physical(7), 100, 3)
        with self.assertRaises(IntegrityError) as ctx:
            self.stack.read(7, 1)
        self.assertEqual(ctx.exception.sector, 7)

    def test_tampered_iv_fails_freshness(self):
        self.stack.device.flip_bit(self.physical(9), 4096, 1)
        with self.assertRaises(FreshnessError):
            self.stack.read(9, 1)

    def test_random_bit_flips_never_read_silently(self):
        # (first byte, end) of the data, IV, AEAD tag and freshness tag fields
        regions = {
            "data": (0, 4096),
            "iv": (4096, 4096 + 8),
            "tag": (4096 + 12, 4096 + 28),
            "freshness": (4096 + 28, 4096 + 44),
        }
        rng = random.Random(11)
        detected = 0
        for case in range(1200):
            region = rng.choice(sorted(regions))
            sector = rng.randrange(32)
            offset = rng.randrange(*regions[region])
            bit = rng.randrange(8)
            with self.subTest(case=case, region=region, sector=sector, offset=offset, bit=bit):
                self.stack.device.flip_bit(self.physical(sector), offset, bit)
                try:
                    data = self.stack.read(sector, 1)
                except (IntegrityError, FreshnessError):
                    detected += 1
                else:
                    # only a stale fast-path tag may be read through, and then unaltered
                    self.assertEqual(region, "freshness")
                    self.assertEqual(data, make_payload(sector, 1))
                finally:
                    self.stack.device.flip_bit(self.physical(sector), offset, bit)
        self.assertGreaterEqual(detected, 800)
        self.assertEqual(self.stack.read(0, 32), make_block(0, 32, 1))

    def test_hundred_rollback_points(self):
        rng = random.Random(5)
        for version in range(2, 102):
            sector = rng.randrange(32)
            with self.subTest(version=version, sector=sector):
                handle = self.stack.device.snapshot()
                self.stack.write(sector, make_block(sector, 1, version))
                if version % 2:
                    self.stack.drain()
                self.stack.device.restore(handle, sectors=[self.physical(sector)])
                self.stack.device.drop_snapshot(handle)
                with self.assertRaises(FreshnessError) as ctx:
                    self.stack.read(sector, 1)
                self.assertEqual(ctx.exception.sector, sector)
                self.stack.write(sector, make_block(sector, 1, version))
                self.assertEqual(self.stack.read(sector, 1), make_block(sector, 1, version))

    def test_tampered_freshness_tag_falls_back_to_full_path(self):
        before = self.counter("full_path")
        self.stack.device.flip_bit(self.physical(11), FRESHNESS_TAG_OFFSET + 2, 0)
        self.assertEqual(self.stack.read(11, 1), make_payload(11, 1))
        self.assertEqual(self.counter("full_path"), before + 1)


class TestFastPath(StackTestCase):
    """Test cases for fast-path tags and refresh."""

    def test_refresh_restores_fast_path(self):
        self.stack.write(0, make_block(0, 16, 1))
        self.stack.drain()
        self.assertEqual(self.stack.refresh(0, 0), 16)

        fast = self.counter("fast_path")
        self.stack.read(0, 16)
        self.assertEqual(self.counter("fast_path"), fast + 16)

        self.stack.write(5, make_block(5, 1, 2))
        full = self.counter("full_path")
        self.stack.read(0, 16)
        # the rewritten sector carries a tag under the new level-1 node
        self.assertEqual(self.counter("full_path"), full + 15)

        self.stack.refresh(0, 0)
        fast = self.counter("fast_path")
        self.stack.read(0, 16)
        self.assertEqual(self.counter("fast_path"), fast + 16)

    def test_refresh_skips_empty_sets_and_checks_range(self):
        self.assertEqual(self.stack.refresh(), 0)
        with self.assertRaises(GeometryError):
            self.stack.remote.refresh_tags(3, 2)

    def test_full_path_refresh_option(self):
        stack = self.make_stack(
            "refreshing",
            config=StackConfig(
                device=SMALL.device,
                remote=RemoteConfig(journal_capacity=64, cache_capacity=8, refresh_on_full_path=True),
                local=SMALL.local,
            ),
        )
        stack.write(0, make_block(0, 4, 1))
        stack.write(0, make_block(0, 1, 2))
        stack.drain()
        self.assertEqual(stack.read(0, 4), make_block(0, 1, 2) + make_block(1, 3, 1))
        self.assertEqual(stack.metrics()["refreshed"], 3)
        fast = stack.metrics().get("fast_path", 0)
        stack.read(0, 4)
        self.assertEqual(stack.metrics().get("fast_path", 0), fast + 4)


class TestCrashRecovery(StackTestCase):
    """Test cases for restarts at every crash point of a write burst."""

    SECTORS = 40

    def burst(self, stack: SecureStack, crash_after: int) -> bytes:
        stack.write(0, make_block(0, self.SECTORS, 1))
        stack.drain()
        stack.device.schedule_crash(crash_after)
        try:
            for lba in range(0, self.SECTORS, 8):
                stack.write(lba, make_block(lba, 8, 2))
            stack.drain()
        except SecureStorageError:
            pass
        return stack.remote.nv.committed_image()

    def test_every_crash_point_recovers(self):
        for crash_after in range(48):
            with self.subTest(crash_after=crash_after):
                stack = self.make_stack(f"crash-{crash_after}")
                image = self.burst(stack, crash_after)
                root = stack.restart_remote(image)
                self.assertEqual(root, stack.remote.rebuild_from_disk()[-1][0])
                data = stack.read(0, self.SECTORS)
                for sector in range(self.SECTORS):
                    chunk = data[sector * 4096:(sector + 1) * 4096]
                    self.assertTrue(check_payload(sector, chunk))
                    self.assertIn(version_of(chunk), (1, 2))
                stack.write(0, make_block(0, 4, 3))
                self.assertEqual(stack.read(0, 4), make_block(0, 4, 3))

    def test_rolled_back_journaled_sector_fails_recovery(self):
        remote = self.stack.remote
        self.stack.write(3, make_block(3, 1, 1))
        self.stack.drain()
        handle = self.stack.device.snapshot()
        self.stack.write(3, make_block(3, 1, 2))
        self.stack.drain()

        # park every hasher so the next write stays short of the root
        release = threading.Event()
        for _ in range(remote.config.hasher_count):
            remote.hashers.submit(release.wait)
        try:
            self.stack.write(3, make_block(3, 1, 3))
            self.assertEqual(remote.nv.entry_at(3).status, JournalStatus.DATA_PERSISTED)
            image = remote.nv.committed_image()
        finally:
            release.set()
        remote.hashers.join()

        self.stack.device.restore(handle, sectors=[self.physical(3)])
        with self.assertRaises(FreshnessViolationError):
            self.stack.restart_remote(image)

    def test_rolled_back_sector_fails_recovery(self):
        self.stack.write(0, make_block(0, 16, 1))
        self.stack.drain()
        handle = self.stack.device.snapshot()
        self.stack.write(6, make_block(6, 1, 2))
        self.stack.drain()
        self.stack.device.restore(handle, sectors=[self.physical(6)])
        with self.assertRaises(FreshnessViolationError):
            self.stack.restart_remote()

    def test_tampered_metadata_sector_fails_recovery(self):
        self.stack.write(0, make_block(0, 16, 1))
        self.stack.drain()
        # the IV slot of sector 2 in data set 0's aggregated sector
        self.stack.device.flip_bit(0, 8 + 2 * 8, 0)
        with self.assertRaises(FreshnessViolationError):
            self.stack.restart_remote()
        self.stack.device.flip_bit(0, 8 + 2 * 8, 0)
        self.stack.device.flip_bit(0, 4000, 5)
        with self.assertRaises(FreshnessViolationError):
            self.stack.restart_remote()

    def test_tampering_between_crash_and_recovery_is_flagged(self):
        device = self.stack.device
        self.stack.write(0, make_block(0, 64, 1))
        self.stack.drain()
        older = device.snapshot()
        for lba in range(0, 64, 8):
            self.stack.write(lba, make_block(lba, 8, 2))
        self.stack.drain()
        # sectors 0-7 stay journaled in the captured image
        self.stack.write(0, make_block(0, 8, 3))
        image = self.stack.remote.nv.committed_image()
        self.stack.remote.hashers.join()
        crashed = device.snapshot()

        rng = random.Random(17)
        for case in range(100):
            kind = ("rollback", "sector-iv", "aggregated-iv")[case % 3]
            sector = rng.randrange(64) if kind != "aggregated-iv" else rng.randrange(8, 64)
            with self.subTest(case=case, kind=kind, sector=sector):
                if kind == "rollback":
                    device.restore(older, sectors=[self.physical(sector)])
                elif kind == "sector-iv":
                    device.flip_bit(self.physical(sector), 4096 + rng.randrange(8), rng.randrange(8))
                else:
                    slot = 8 + (sector % 16) * 8 + rng.randrange(8)
                    device.flip_bit(sector // 16, slot, rng.randrange(8))
                with self.assertRaises(FreshnessViolationError):
                    self.stack.restart_remote(image)
                device.restore(crashed)

        self.stack.restart_remote(image)
        self.assertEqual(self.stack.read(0, 8), make_block(0, 8, 3))
        self.assertEqual(self.stack.read(8, 56), make_block(8, 56, 2))

    def test_clean_restart_keeps_everything(self):
        self.stack.write(20, make_block(20, 24, 4))
        root = self.stack.restart_remote()
        self.assertEqual(self.stack.read(20, 24), make_block(20, 24, 4))
        self.assertEqual(self.stack.remote.nv.live_count, 0)
        self.assertEqual(root, self.stack.remote.nv.root)

    def test_recover_over_the_wire(self):
        self.stack.write(0, make_block(0, 8, 1))
        self.stack.local.recover_remote(DEVICE_ID)
        self.assertEqual(self.stack.read(0, 8), make_block(0, 8, 1))


class TestIntegrityOnly(StackTestCase):
    """Without the tree a rolled-back sector still authenticates."""

    mode = "integrity"

    def test_rollback_goes_unnoticed(self):
        self.stack.write(3, make_block(3, 1, 1))
        handle = self.stack.device.snapshot()
        self.stack.write(3, make_block(3, 1, 2))
        self.stack.device.restore(handle, sectors=[self.physical(3)])
        self.assertEqual(self.stack.read(3, 1), make_payload(3, 1))
        self.assertEqual(self.stack.drain(), 0)

    def test_tamper_still_detected(self):
        self.stack.write(3, make_block(3, 1, 1))
        self.stack.device.flip_bit(self.physical(3), 0, 0)
        with self.assertRaises(IntegrityError):
            self.stack.read(3, 1)


class TestLegacyMetadata(StackTestCase):
    """Test cases for devices with 16-byte metadata."""

    config = LEGACY

    def test_round_trip(self):
        block = make_block(0, 20, 1)
        self.stack.write(0, block)
        self.assertEqual(self.stack.read(0, 20), block)
        self.assertEqual(self.stack.remote.refresh_tags(0, 0), 0)

    def test_rollback_and_tamper(self):
        self.stack.write(3, make_block(3, 2, 1))
        handle = self.stack.device.snapshot()
        self.stack.write(3, make_block(3, 2, 2))
        self.stack.drain()
        self.stack.device.restore(handle, sectors=[self.physical(3)])
        with self.assertRaises(FreshnessError):
            self.stack.read(3, 1)
        self.stack.device.flip_bit(self.physical(4), 10, 2)
        with self.assertRaises(IntegrityError):
            self.stack.read(4, 1)

    def test_drain_and_restart(self):
        self.stack.write(0, make_block(0, 40, 1))
        self.stack.restart_remote()
        self.assertEqual(self.stack.read(0, 40), make_block(0, 40, 1))


if __name__ == '__main__':
    unittest.main()
