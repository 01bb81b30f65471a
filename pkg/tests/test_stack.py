"""Unit tests for the assembled in-process stack."""

import shutil
import tempfile
import unittest
from pathlib import Path

from src.config import DeviceConfig, StackConfig
from src.exceptions import ConfigError, GeometryError
from src.layout import data_to_physical
from src.stack import DEVICE_ID, LESSEE_ID, SecureStack
from src.workload import make_block

CONFIG = StackConfig(device=DeviceConfig(total_sectors=1024, data_set_size=16))


class TestSecureStack(unittest.TestCase):
    """Test cases for SecureStack in each mode."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_round_trip_in_every_mode(self):
        for mode in ("baremetal", "integrity", "freshness"):
            with self.subTest(mode=mode):
                with SecureStack(CONFIG, mode, Path(self.temp_dir) / mode) as stack:
                    block = make_block(30, 5, 1)
                    self.assertEqual(stack.write(30, block), 5)
                    self.assertEqual(stack.read(30, 5), block)
                    self.assertEqual(stack.drain(), 0)
                    self.assertEqual(stack.data_sectors, 1024 - 61)

    def test_baremetal_stores_plaintext(self):
        with SecureStack(CONFIG, "baremetal", Path(self.temp_dir)) as stack:
            block = make_block(0, 1, 1)
            stack.write(0, block)
            data, meta = stack.device.read_sectors(data_to_physical(0, stack.geometry), 1)[0]
            self.assertEqual(data, block)
            self.assertEqual(meta, bytes(64))
            self.assertEqual(stack.metrics(), {})
            self.assertEqual(stack.refresh(), 0)
            with self.assertRaises(GeometryError):
                stack.read(stack.data_sectors, 1)
            with self.assertRaises(ConfigError):
                stack.restart_remote()

    def test_encrypted_modes_hide_plaintext(self):
        with SecureStack(CONFIG, "integrity", Path(self.temp_dir)) as stack:
            block = make_block(0, 1, 1)
            stack.write(0, block)
            data, _ = stack.device.read_sectors(data_to_physical(0, stack.geometry), 1)[0]
            self.assertNotEqual(data, block)

    def test_ec_override(self):
        stack = SecureStack(CONFIG, "freshness", Path(self.temp_dir), ec=False)
        self.assertFalse(stack.config.remote.eventual_consistency)
        self.assertTrue(CONFIG.remote.eventual_consistency)

    def test_unknown_mode(self):
        with self.assertRaises(ConfigError):
            SecureStack(CONFIG, "paranoid", Path(self.temp_dir))

    def test_close_returns_counters(self):
        stack = SecureStack(CONFIG, "freshness", Path(self.temp_dir)).build()
        stack.write(0, make_block(0, 4, 1))
        kbs = stack.kbs
        stack.close()
        self.assertEqual(kbs.ledger(DEVICE_ID).outstanding_units(LESSEE_ID), 5)
        self.assertIsNone(stack.remote)


if __name__ == '__main__':
    unittest.main()
