"""Key broker service: tenant keys, per-device counter ledgers and the KBS frame handler."""

import bisect
import json
import os
import secrets
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

from .config import COUNTER_BITS, WINDOW_SIZE, AttestationConfig, KbsConfig
from .crypto import CipherSuite, DEFAULT_SUITE, KEY_BYTES, derive_device_key, random_key
from .exceptions import (
    AuthenticationError,
    HandshakeError,
    KbsError,
    LedgerError,
    ProtocolError,
    UnknownDeviceError,
    UnknownTenantError,
)
from .logger import setup_logger
from .transport import (
    AckBody,
    Channel,
    Frame,
    FrameType,
    HandshakeResponder,
    KeyRequestBody,
    KeyResponseBody,
    LeaseGrantBody,
    LeaseRequestBody,
    RegisterBody,
    ReturnBody,
    SessionState,
    client_handshake,
    expect,
    message_frame,
    next_request_id,
)

logger = setup_logger(__name__)

Interval = Tuple[int, int]
KEY_WRAP_NONCE_BYTES = 12


@dataclass(frozen=True)
class LeaseRange:
    """Half-open counter range [start, end) of one device leased to one lessee."""

    start: int
    end: int
    device_id: bytes = b""
    lessee_id: str = ""

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise LedgerError(f"Invalid lease range [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start


def _insert_merged(intervals: List[Interval], new: Interval) -> List[Interval]:
    """Insert into a sorted disjoint list, merging with adjacent neighbours."""
    start, end = new
    index = bisect.bisect_left(intervals, (start, end))
    merged = intervals[:index] + [(start, end)] + intervals[index:]
    if index > 0 and merged[index - 1][1] > start:
        raise LedgerError(f"Range [{start}, {end}) overlaps [{merged[index - 1][0]}, {merged[index - 1][1]})")
    if index + 1 < len(merged) and merged[index + 1][0] < end:
        raise LedgerError(f"Range [{start}, {end}) overlaps [{merged[index + 1][0]}, {merged[index + 1][1]})")
    if index + 1 < len(merged) and merged[index + 1][0] == end:
        merged[index:index + 2] = [(start, merged[index + 1][1])]
    if index > 0 and merged[index - 1][1] == start:
        merged[index - 1:index + 1] = [(merged[index - 1][0], merged[index][1])]
    return merged


def _remove_from(intervals: List[Interval], cut: Interval) -> List[Interval]:
    """Remove a sub-range that lies within one interval of a sorted list."""
    start, end = cut
    index = bisect.bisect_right(intervals, (start, float("inf"))) - 1
    if index < 0 or not (intervals[index][0] <= start and end <= intervals[index][1]):
        raise LedgerError(f"Range [{start}, {end}) is not held")
    lo, hi = intervals[index]
    pieces = [p for p in ((lo, start), (end, hi)) if p[0] < p[1]]
    return intervals[:index] + pieces + intervals[index + 1:]


class DeviceCounterLedger:
    """
    Free and leased IV counter ranges of one device.

    Free and outstanding ranges together always partition [0, space); free
    ranges are kept sorted and compacted so no two are adjacent.
    """

    def __init__(
        self,
        device_id: bytes,
        space: int = 2**COUNTER_BITS,
        free: Optional[List[Interval]] = None,
        outstanding: Optional[Dict[str, List[Interval]]] = None
    ):
        self.device_id = bytes(device_id)
        self.space = space
        self.free: List[Interval] = list(free) if free is not None else [(0, space)]
        self.outstanding: Dict[str, List[Interval]] = {
            k: list(v) for k, v in (outstanding or {}).items()
        }

    def free_units(self) -> int:
        return sum(end - start for start, end in self.free)

    def outstanding_units(self, lessee_id: Optional[str] = None) -> int:
        if lessee_id is not None:
            return sum(end - start for start, end in self.outstanding.get(lessee_id, []))
        return sum(end - start for ranges in self.outstanding.values() for start, end in ranges)

    def lease(self, lessee_id: str, units: int) -> List[LeaseRange]:
        """
        Hand out `units` counters from the lowest free ranges.

        Raises:
            LedgerError: If units is negative or the free space is too small
        """
        if units < 0:
            raise LedgerError(f"Lease size must not be negative, got {units}")
        if units == 0:
            return []
        if self.free_units() < units:
            raise LedgerError(
                f"Device {self.device_id.hex()} has {self.free_units()} free counters, {units} requested"
            )
        granted = []
        remaining = units
        while remaining:
            start, end = self.free[0]
            take = min(remaining, end - start)
            granted.append((start, start + take))
            if take == end - start:
                self.free.pop(0)
            else:
                self.free[0] = (start + take, end)
            remaining -= take

        held = self.outstanding.setdefault(lessee_id, [])
        for interval in granted:
            held = _insert_merged(held, interval)
        self.outstanding[lessee_id] = held
        return [LeaseRange(s, e, self.device_id, lessee_id) for s, e in granted]

    def give_back(self, lessee_id: str, ranges: Sequence[Interval]) -> int:
        """
        Return (possibly partial) ranges held by a lessee; all or nothing.

        Returns:
            Number of counters returned

        Raises:
            LedgerError: If any range is not held by the lessee
        """
        held = list(self.outstanding.get(lessee_id, []))
        free = list(self.free)
        returned = 0
        for start, end in ranges:
            if not 0 <= start < end <= self.space:
                raise LedgerError(f"Invalid range [{start}, {end})")
            held = _remove_from(held, (start, end))
            free = _insert_merged(free, (start, end))
            returned += end - start
        if held:
            self.outstanding[lessee_id] = held
        else:
            self.outstanding.pop(lessee_id, None)
        self.free = free
        return returned

    def check_invariants(self) -> None:
        """
        Raises:
            LedgerError: If the ranges do not partition the counter space
        """
        for a, b in zip(self.free, self.free[1:]):
            if a[1] >= b[0]:
                raise LedgerError(f"Free ranges {a} and {b} are unsorted, overlapping or adjacent")
        everything = sorted(self.free + [r for ranges in self.outstanding.values() for r in ranges])
        cursor = 0
        for start, end in everything:
            if start != cursor or end <= start:
                raise LedgerError(f"Counter space broken at {cursor}: next range [{start}, {end})")
            cursor = end
        if cursor != self.space:
            raise LedgerError(f"Counter space ends at {cursor}, expected {self.space}")

    def to_dict(self) -> dict:
        return {
            "space": self.space,
            "free": [list(r) for r in self.free],
            "outstanding": {k: [list(r) for r in v] for k, v in self.outstanding.items()},
        }

    @classmethod
    def from_dict(cls, device_id: bytes, data: dict) -> "DeviceCounterLedger":
        return cls(
            device_id,
            space=data["space"],
            free=[tuple(r) for r in data["free"]],
            outstanding={k: [tuple(r) for r in v] for k, v in data["outstanding"].items()},
        )


RangeLike = Union[LeaseRange, Interval]


class KeyBrokerService:
    """
    Tenant storage keys plus one counter ledger per registered device.

    Each ledger has its own lock, so leases on different devices proceed in
    parallel. With a state file every change is written to a temporary file
    and renamed over the previous state.
    """

    def __init__(self, config: KbsConfig = KbsConfig(), suite: CipherSuite = DEFAULT_SUITE):
        self.config = config
        self.suite = suite
        self.state_file = Path(config.state_file) if config.state_file else None
        self._tenants: Dict[str, bytes] = {}
        self._ledgers: Dict[bytes, DeviceCounterLedger] = {}
        self._ledger_locks: Dict[bytes, threading.Lock] = {}
        self._registry_lock = threading.Lock()
        self._persist_lock = threading.Lock()
        self._authenticated: Set[int] = set()

        if self.state_file is not None and self.state_file.exists():
            self._load()

    # -- persistence -----------------------------------------------------

    def _load(self) -> None:
        try:
            with open(self.state_file, "r") as f:
                state = json.load(f)
            self._tenants = {t: bytes.fromhex(k) for t, k in state["tenants"].items()}
            for device_hex, data in state["devices"].items():
                device_id = bytes.fromhex(device_hex)
                self._ledgers[device_id] = DeviceCounterLedger.from_dict(device_id, data)
                self._ledger_locks[device_id] = threading.Lock()
        except (OSError, ValueError, KeyError) as e:
            logger.error(f"Failed to load KBS state from {self.state_file}: {e}")
            raise KbsError(f"Failed to load KBS state from {self.state_file}: {e}") from e
        logger.info(
            f"Loaded KBS state: {len(self._tenants)} tenants, {len(self._ledgers)} devices"
        )

    def _persist(self) -> None:
        if self.state_file is None:
            return
        with self._persist_lock:
            with self._registry_lock:
                tenants = {t: k.hex() for t, k in self._tenants.items()}
                ledgers = [(d, ledger, self._ledger_locks[d]) for d, ledger in self._ledgers.items()]
            devices = {}
            for device_id, ledger, lock in ledgers:
                with lock:
                    devices[device_id.hex()] = ledger.to_dict()
            state = {"tenants": tenants, "devices": devices}
            self.state_file.parent.mkdir(parents=True, exist_ok=True)
            tmp = self.state_file.with_suffix(self.state_file.suffix + ".tmp")
            with open(tmp, "w") as f:
                json.dump(state, f, indent=2)
            os.replace(tmp, self.state_file)

    # -- administration --------------------------------------------------

    def register_tenant(self, tenant_id: str, tenant_key: Optional[bytes] = None) -> bytes:
        """Register a tenant (idempotent) and return its storage key k_s."""
        with self._registry_lock:
            key = self._tenants.get(tenant_id)
            if key is None:
                key = tenant_key if tenant_key is not None else random_key()
                if len(key) != KEY_BYTES:
                    raise KbsError(f"Tenant key must be {KEY_BYTES} bytes")
                self._tenants[tenant_id] = key
                logger.info(f"Registered tenant '{tenant_id}'")
        self._persist()
        return key

    def register_device(self, device_id: bytes) -> DeviceCounterLedger:
        """
        Register a device with a fresh ledger covering the whole counter space.

        Raises:
            KbsError: If the device is already registered
        """
        device_id = bytes(device_id)
        with self._registry_lock:
            if device_id in self._ledgers:
                raise KbsError(f"Device {device_id.hex()} is already registered")
            self._ledgers[device_id] = DeviceCounterLedger(device_id)
            self._ledger_locks[device_id] = threading.Lock()
        logger.info(f"Registered device {device_id.hex()}")
        self._persist()
        return self._ledgers[device_id]

    def ledger(self, device_id: bytes) -> DeviceCounterLedger:
        with self._registry_lock:
            ledger = self._ledgers.get(bytes(device_id))
        if ledger is None:
            raise UnknownDeviceError(f"Device {bytes(device_id).hex()} is not registered")
        return ledger

    def authorize_session(self, session_id: int) -> None:
        with self._registry_lock:
            self._authenticated.add(session_id)

    def revoke_session(self, session_id: int) -> None:
        with self._registry_lock:
            self._authenticated.discard(session_id)

    # -- operations ------------------------------------------------------

    def lease_counters(self, device_id: bytes, lessee_id: str, units: int) -> List[LeaseRange]:
        """
        Lease counters of a device to a local instance.

        Raises:
            UnknownDeviceError: If the device is not registered
            LedgerError: If the ledger cannot satisfy the request
        """
        ledger = self.ledger(device_id)
        with self._ledger_locks[ledger.device_id]:
            ranges = ledger.lease(lessee_id, units)
        self._persist()
        logger.debug(f"Leased {units} counters of {ledger.device_id.hex()} to '{lessee_id}'")
        return ranges

    def return_counters(self, device_id: bytes, lessee_id: str, ranges: Sequence[RangeLike]) -> int:
        """Take back unused counters; partial ranges are allowed."""
        ledger = self.ledger(device_id)
        intervals = [(r.start, r.end) if isinstance(r, LeaseRange) else tuple(r) for r in ranges]
        with self._ledger_locks[ledger.device_id]:
            returned = ledger.give_back(lessee_id, intervals)
        self._persist()
        logger.debug(f"'{lessee_id}' returned {returned} counters of {ledger.device_id.hex()}")
        return returned

    def audit(self, device_id: bytes) -> None:
        """
        Check a device ledger's invariants while no lease or return is running on it.

        Raises:
            UnknownDeviceError: If the device is not registered
            LedgerError: If the ledger is inconsistent
        """
        ledger = self.ledger(device_id)
        with self._ledger_locks[ledger.device_id]:
            ledger.check_invariants()

    def provision_tenant_keys(self, tenant_id: str, device_id: bytes, session_id: int) -> bytes:
        """
        Derive k_d = HMAC(k_s, device_id) for an attested local instance.

        Raises:
            AuthenticationError: If the session did not pass attestation
            UnknownTenantError: If the tenant is not registered
            UnknownDeviceError: If the device is not registered
        """
        with self._registry_lock:
            authenticated = session_id in self._authenticated
            tenant_key = self._tenants.get(tenant_id)
            known_device = bytes(device_id) in self._ledgers
        if not authenticated:
            logger.warning(f"Key request for '{tenant_id}' on an unauthenticated session")
            raise AuthenticationError("Key requests require an attested session")
        if tenant_key is None:
            raise UnknownTenantError(f"Tenant '{tenant_id}' is not registered")
        if not known_device:
            raise UnknownDeviceError(f"Device {bytes(device_id).hex()} is not registered")
        return derive_device_key(tenant_key, bytes(device_id), self.suite)


def _wrap_aad(request_id: int, tenant_id: str, device_id: bytes) -> bytes:
    return request_id.to_bytes(8, "little") + tenant_id.encode() + bytes(device_id)


class KbsFrameHandler:
    """Serves the KBS over frames; everything but the handshake needs an attested session."""

    def __init__(
        self,
        kbs: KeyBrokerService,
        attestation: AttestationConfig = AttestationConfig(),
        window_size: int = WINDOW_SIZE
    ):
        self.kbs = kbs
        self.responder = HandshakeResponder(
            attestation.psk,
            attestation.kbs_measurement,
            attestation.local_measurement,
            window_size=window_size,
            suite=kbs.suite,
            on_established=lambda session: kbs.authorize_session(session.session_id),
        )

    def _session(self, frame: Frame) -> SessionState:
        try:
            return self.responder.session(frame.session_id)
        except HandshakeError as e:
            raise AuthenticationError(f"Unauthenticated session {frame.session_id:#x}") from e

    def handle(self, frame: Frame) -> Frame:
        if frame.type == FrameType.HELLO:
            return self.responder.handle_hello(frame)
        if frame.type == FrameType.ATTEST:
            return self.responder.handle_attest(frame)

        session = self._session(frame)
        sid = frame.session_id
        if frame.type == FrameType.REGISTER:
            body = RegisterBody.decode(frame.body)
            self.kbs.register_device(body.device_id)
            return message_frame(FrameType.ACK, sid, AckBody(body.request_id))
        if frame.type == FrameType.LEASE:
            body = LeaseRequestBody.decode(frame.body)
            ranges = self.kbs.lease_counters(body.device_id, body.lessee_id, body.units)
            grant = LeaseGrantBody(body.request_id, body.device_id, [(r.start, r.end) for r in ranges])
            return message_frame(FrameType.LEASE, sid, grant)
        if frame.type == FrameType.RETURN:
            body = ReturnBody.decode(frame.body)
            returned = self.kbs.return_counters(body.device_id, body.lessee_id, body.ranges)
            return message_frame(FrameType.ACK, sid, AckBody(body.request_id, returned))
        if frame.type == FrameType.KEY:
            body = KeyRequestBody.decode(frame.body)
            device_key = self.kbs.provision_tenant_keys(body.tenant_id, body.device_id, sid)
            nonce = secrets.token_bytes(KEY_WRAP_NONCE_BYTES)
            wrapped = self.kbs.suite.cipher(session.network_key).encrypt(
                nonce, device_key, _wrap_aad(body.request_id, body.tenant_id, body.device_id)
            )
            return message_frame(FrameType.KEY, sid, KeyResponseBody(body.request_id, nonce, wrapped))
        raise ProtocolError(f"KBS does not serve {frame.type.name} frames")


class KbsClient:
    """Local-instance side of the KBS protocol; attests on first use."""

    def __init__(
        self,
        channel: Channel,
        attestation: AttestationConfig = AttestationConfig(),
        suite: CipherSuite = DEFAULT_SUITE,
        window_size: int = WINDOW_SIZE
    ):
        self.channel = channel
        self.attestation = attestation
        self.suite = suite
        self.window_size = window_size
        self._session: Optional[SessionState] = None
        self._lock = threading.Lock()

    @property
    def session(self) -> SessionState:
        with self._lock:
            if self._session is None:
                self._session = client_handshake(
                    self.channel,
                    self.attestation.psk,
                    self.attestation.local_measurement,
                    self.attestation.kbs_measurement,
                    self.window_size,
                    self.suite,
                )
            return self._session

    def register_device(self, device_id: bytes) -> None:
        sid = self.session.session_id
        frame = message_frame(FrameType.REGISTER, sid, RegisterBody(next_request_id(), device_id))
        expect(self.channel.request(frame), FrameType.ACK, AckBody)

    def lease(self, device_id: bytes, lessee_id: str, units: int) -> List[LeaseRange]:
        sid = self.session.session_id
        request = LeaseRequestBody(next_request_id(), device_id, lessee_id, units)
        grant = expect(self.channel.request(message_frame(FrameType.LEASE, sid, request)),
                       FrameType.LEASE, LeaseGrantBody)
        return [LeaseRange(s, e, device_id, lessee_id) for s, e in grant.ranges]

    def return_ranges(self, device_id: bytes, lessee_id: str, ranges: Sequence[RangeLike]) -> int:
        sid = self.session.session_id
        intervals = [(r.start, r.end) if isinstance(r, LeaseRange) else tuple(r) for r in ranges]
        request = ReturnBody(next_request_id(), device_id, lessee_id, intervals)
        ack = expect(self.channel.request(message_frame(FrameType.RETURN, sid, request)),
                     FrameType.ACK, AckBody)
        return ack.value

    def provision(self, tenant_id: str, device_id: bytes) -> bytes:
        """Fetch and unwrap the tenant-device key k_d."""
        session = self.session
        request = KeyRequestBody(next_request_id(), tenant_id, device_id)
        response = expect(self.channel.request(message_frame(FrameType.KEY, session.session_id, request)),
                          FrameType.KEY, KeyResponseBody)
        try:
            return self.suite.cipher(session.network_key).decrypt(
                response.nonce, response.wrapped, _wrap_aad(request.request_id, tenant_id, device_id)
            )
        except Exception as e:
            logger.error(f"Failed to unwrap device key for '{tenant_id}': {e}")
            raise AuthenticationError("Wrapped device key failed authentication") from e
