"""Unit tests for the key broker service and its counter ledgers."""

import json
import random
import shutil
import tempfile
import threading
import unittest
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List

from src.config import LEASE_UNITS, AttestationConfig, KbsConfig
from src.crypto import derive_device_key
from src.exceptions import (
    AuthenticationError,
    HandshakeError,
    KbsError,
    LedgerError,
    UnknownDeviceError,
    UnknownTenantError,
)
from src.kbs import DeviceCounterLedger, Interval, KbsClient, KbsFrameHandler, KeyBrokerService, LeaseRange
from src.transport import AdminBody, FrameType, InProcessChannel, message_frame

DEVICE = bytes.fromhex("0011223344556677")


class TestDeviceCounterLedger(unittest.TestCase):
    """Test cases for lease/return bookkeeping."""

    def setUp(self):
        self.ledger = DeviceCounterLedger(DEVICE, space=1000)

    def test_first_lease_starts_at_zero(self):
        ranges = self.ledger.lease("a", 100)
        self.assertEqual([(r.start, r.end) for r in ranges], [(0, 100)])
        self.assertEqual(self.ledger.free_units(), 900)
        self.assertEqual(self.ledger.outstanding_units("a"), 100)

    def test_zero_lease_is_empty(self):
        self.assertEqual(self.ledger.lease("a", 0), [])
        self.assertEqual(self.ledger.free_units(), 1000)

    def test_returned_ranges_merge_and_are_reused(self):
        self.ledger.lease("a", 200)
        self.ledger.lease("b", 100)
        self.ledger.give_back("a", [(0, 100), (100, 200)])
        self.assertEqual(self.ledger.free, [(0, 200), (300, 1000)])
        ranges = self.ledger.lease("c", 150)
        self.assertEqual([(r.start, r.end) for r in ranges], [(0, 150)])
        self.ledger.check_invariants()

    def test_lease_spans_fragments(self):
        self.ledger.lease("a", 300)
        self.ledger.give_back("a", [(50, 60), (100, 120)])
        ranges = self.ledger.lease("b", 40)
        self.assertEqual([(r.start, r.end) for r in ranges], [(50, 60), (100, 120), (300, 310)])
        self.assertEqual(sum(len(r) for r in ranges), 40)
        self.ledger.check_invariants()

    def test_exhaustion_and_bad_requests(self):
        with self.assertRaises(LedgerError):
            self.ledger.lease("a", 1001)
        with self.assertRaises(LedgerError):
            self.ledger.lease("a", -1)
        self.ledger.lease("a", 10)
        with self.assertRaises(LedgerError):
            self.ledger.give_back("b", [(0, 5)])
        with self.assertRaises(LedgerError):
            self.ledger.give_back("a", [(5, 20)])

    def test_give_back_is_all_or_nothing(self):
        self.ledger.lease("a", 10)
        with self.assertRaises(LedgerError):
            self.ledger.give_back("a", [(0, 5), (500, 510)])
        self.assertEqual(self.ledger.outstanding_units("a"), 10)
        self.ledger.check_invariants()

    def test_randomized_four_lessees_never_overlap(self):
        rng = random.Random(17)
        ledger = DeviceCounterLedger(DEVICE, space=5000)
        lessees = ["l0", "l1", "l2", "l3"]
        held = {name: set() for name in lessees}
        for _ in range(2000):
            name = rng.choice(lessees)
            if rng.random() < 0.6:
                units = rng.randint(1, 60)
                if units > ledger.free_units():
                    continue
                for r in ledger.lease(name, units):
                    counters = set(range(r.start, r.end))
                    for other in lessees:
                        self.assertFalse(counters & held[other])
                    held[name] |= counters
            elif held[name]:
                start = rng.choice(sorted(held[name]))
                end = start + 1
                while end in held[name] and end - start < 30:
                    end += 1
                ledger.give_back(name, [(start, end)])
                held[name] -= set(range(start, end))
            ledger.check_invariants()
            for other in lessees:
                self.assertEqual(ledger.outstanding_units(other), len(held[other]))

    def test_dict_round_trip(self):
        self.ledger.lease("a", 42)
        copy = DeviceCounterLedger.from_dict(DEVICE, json.loads(json.dumps(self.ledger.to_dict())))
        self.assertEqual(copy.free, self.ledger.free)
        self.assertEqual(copy.outstanding, self.ledger.outstanding)

    def test_lease_range_validation(self):
        self.assertEqual(len(LeaseRange(5, 10)), 5)
        with self.assertRaises(LedgerError):
            LeaseRange(10, 10)


class TestKeyBrokerService(unittest.TestCase):
    """Test cases for KeyBrokerService."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.state = Path(self.temp_dir) / "kbs.json"
        self.kbs = KeyBrokerService(KbsConfig(state_file=str(self.state)))
        self.k_s = self.kbs.register_tenant("tenant")
        self.kbs.register_device(DEVICE)

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_default_lease_is_one_terabyte(self):
        ranges = self.kbs.lease_counters(DEVICE, "local", LEASE_UNITS)
        self.assertEqual(sum(len(r) for r in ranges), 268435456)
        self.assertEqual(LEASE_UNITS * 4096, 2**40)

    def test_registration(self):
        self.assertEqual(self.kbs.register_tenant("tenant"), self.k_s)
        with self.assertRaises(KbsError):
            self.kbs.register_device(DEVICE)
        with self.assertRaises(UnknownDeviceError):
            self.kbs.lease_counters(b"other", "local", 1)

    def test_provision_requires_authentication(self):
        with self.assertRaises(AuthenticationError):
            self.kbs.provision_tenant_keys("tenant", DEVICE, 99)
        self.kbs.authorize_session(99)
        self.assertEqual(self.kbs.provision_tenant_keys("tenant", DEVICE, 99), derive_device_key(self.k_s, DEVICE))
        with self.assertRaises(UnknownTenantError):
            self.kbs.provision_tenant_keys("nobody", DEVICE, 99)
        self.kbs.revoke_session(99)
        with self.assertRaises(AuthenticationError):
            self.kbs.provision_tenant_keys("tenant", DEVICE, 99)

    def test_state_survives_restart(self):
        first = self.kbs.lease_counters(DEVICE, "local", 100)
        restarted = KeyBrokerService(KbsConfig(state_file=str(self.state)))
        second = restarted.lease_counters(DEVICE, "local", 100)
        self.assertEqual(first[0].end, second[0].start)
        self.assertEqual(restarted.register_tenant("tenant"), self.k_s)

    def test_corrupt_state_file(self):
        self.state.write_text("{not json")
        with self.assertRaises(KbsError):
            KeyBrokerService(KbsConfig(state_file=str(self.state)))


class TestConcurrentLeasing(unittest.TestCase):
    """Four lessees leasing and returning counters from their own threads."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.granted = {}
        self.granted_lock = threading.Lock()

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def churn(self, kbs: KeyBrokerService, device: bytes, lessee: str, ops: int, seed: int) -> List[Interval]:
        """Interleaved random leases and (partial) returns; returns the ranges still held."""
        rng = random.Random(seed)
        held: List[Interval] = []
        taken = self.granted.setdefault(device, set())
        for op in range(ops):
            if rng.random() < 0.6 or not held:
                for r in kbs.lease_counters(device, lessee, rng.randint(1, 60)):
                    counters = set(range(r.start, r.end))
                    with self.granted_lock:
                        overlap = counters & taken
                        taken |= counters
                    self.assertFalse(overlap, f"{lessee} was granted counters held elsewhere")
                    held.append((r.start, r.end))
            else:
                index = rng.randrange(len(held))
                start, end = held[index]
                cut = rng.randint(start + 1, end)
                if cut < end:
                    held[index] = (cut, end)
                else:
                    held[index] = held[-1]
                    held.pop()
                with self.granted_lock:
                    taken -= set(range(start, cut))
                self.assertEqual(kbs.return_counters(device, lessee, [(start, cut)]), cut - start)
            if op % 50 == 0:
                kbs.audit(device)
        return held

    def run_lessees(self, kbs: KeyBrokerService, devices, ops: int) -> Dict[tuple, List[Interval]]:
        jobs = {}
        with ThreadPoolExecutor(max_workers=4) as pool:
            for n in range(4):
                device = devices[n % len(devices)]
                jobs[(device, f"lessee-{n}")] = pool.submit(self.churn, kbs, device, f"lessee-{n}", ops, n)
        return {key: job.result() for key, job in jobs.items()}

    def test_ten_thousand_interleaved_operations(self):
        kbs = KeyBrokerService()
        kbs.register_device(DEVICE)
        held = self.run_lessees(kbs, [DEVICE], 2500)

        kbs.audit(DEVICE)
        ledger = kbs.ledger(DEVICE)
        for (_, lessee), ranges in held.items():
            self.assertEqual(ledger.outstanding_units(lessee), sum(end - start for start, end in ranges))
        self.assertEqual(ledger.free_units() + ledger.outstanding_units(), 2**58)

    def test_concurrent_changes_persist_consistently(self):
        state = Path(self.temp_dir) / "kbs.json"
        kbs = KeyBrokerService(KbsConfig(state_file=str(state)))
        other = bytes.fromhex("8899aabbccddeeff")
        kbs.register_device(DEVICE)
        kbs.register_device(other)
        self.run_lessees(kbs, [DEVICE, other], 150)

        restarted = KeyBrokerService(KbsConfig(state_file=str(state)))
        for device in (DEVICE, other):
            restarted.audit(device)
            self.assertEqual(restarted.ledger(device).free, kbs.ledger(device).free)
            self.assertEqual(restarted.ledger(device).outstanding, kbs.ledger(device).outstanding)


class TestKbsProtocol(unittest.TestCase):
    """Test cases for the KBS served over frames."""

    def setUp(self):
        self.kbs = KeyBrokerService()
        self.k_s = self.kbs.register_tenant("tenant")
        self.handler = KbsFrameHandler(self.kbs)
        self.client = KbsClient(InProcessChannel(self.handler))

    def test_register_lease_return(self):
        self.client.register_device(DEVICE)
        ranges = self.client.lease(DEVICE, "local", 500)
        self.assertEqual([(r.start, r.end) for r in ranges], [(0, 500)])
        self.assertEqual(self.client.return_ranges(DEVICE, "local", [(250, 500)]), 250)
        self.assertEqual(self.kbs.ledger(DEVICE).free_units(), 2**58 - 250)

    def test_provision_unwraps_device_key(self):
        self.kbs.register_device(DEVICE)
        self.assertEqual(self.client.provision("tenant", DEVICE), derive_device_key(self.k_s, DEVICE))

    def test_errors_cross_the_wire(self):
        with self.assertRaises(UnknownDeviceError):
            self.client.lease(DEVICE, "local", 1)
        self.kbs.register_device(DEVICE)
        with self.assertRaises(KbsError):
            self.client.register_device(DEVICE)
        with self.assertRaises(UnknownTenantError):
            self.client.provision("nobody", DEVICE)

    def test_unattested_session_rejected(self):
        self.kbs.register_device(DEVICE)
        channel = InProcessChannel(self.handler)
        response = channel.request(message_frame(FrameType.DRAIN, 1234, AdminBody(1)))
        self.assertEqual(response.type, FrameType.REJECT)

    def test_wrong_psk_fails_handshake(self):
        bad = KbsClient(InProcessChannel(self.handler), replace(AttestationConfig(), psk=b"wrong-psk"))
        with self.assertRaises(HandshakeError):
            bad.lease(DEVICE, "local", 1)


if __name__ == '__main__':
    unittest.main()
