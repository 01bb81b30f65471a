"""Local engine: counter leasing, sector sealing and end-to-end read verification."""

import hmac
import threading
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, List, Optional, Set, Tuple

from .config import SECTOR_BYTES, AttestationConfig, LocalConfig
from .crypto import (
    CipherSuite,
    DEFAULT_SUITE,
    KeyHierarchy,
    network_mac,
    open_sector,
    open_sector_truncated,
    seal_sector,
)
from .exceptions import (
    CounterExhaustedError,
    GeometryError,
    NetworkFreshnessError,
    ProtocolError,
    SecureStorageError,
)
from .kbs import KbsClient, LeaseRange
from .layout import (
    LEGACY_KEY_ID_BITS,
    LEGACY_TAG_BYTES,
    DeviceGeometry,
    SectorMetadata64,
    decode_metadata,
    encode_metadata,
)
from .logger import setup_logger
from .transport import (
    AckBody,
    AdminBody,
    Channel,
    FrameType,
    ReadBody,
    ReadRespBody,
    RefreshBody,
    SessionState,
    WriteBody,
    client_handshake,
    expect,
    message_frame,
    next_request_id,
)

logger = setup_logger(__name__)

REFILL_WAIT_S = 5.0


class CounterPool:
    """
    IV counters leased from the KBS for one device.

    Counters are handed out in ascending order within each lease and never
    twice. Counter 0 is never issued: an all-zero IV marks an unwritten
    sector. Dropping below the watermark starts one background refill.
    """

    def __init__(
        self,
        lease: Callable[[int], List[LeaseRange]],
        lease_units: int,
        watermark: int
    ):
        self._lease = lease
        self.lease_units = lease_units
        self.watermark = watermark
        self._ranges: Deque[List[int]] = deque()
        self._cond = threading.Condition()
        self._refilling = False
        self.refill_requests = 0

    def _available(self) -> int:
        return sum(end - cursor for cursor, end in self._ranges)

    def remaining(self) -> int:
        with self._cond:
            return self._available()

    def _add(self, ranges: List[LeaseRange]) -> None:
        for r in ranges:
            start = max(r.start, 1)
            if start < r.end:
                self._ranges.append([start, r.end])

    def _pop(self, count: int) -> List[int]:
        out: List[int] = []
        while count:
            span = self._ranges[0]
            take = min(count, span[1] - span[0])
            out.extend(range(span[0], span[0] + take))
            span[0] += take
            if span[0] == span[1]:
                self._ranges.popleft()
            count -= take
        return out

    def _refill(self) -> None:
        # caller has set self._refilling
        try:
            self.refill_requests += 1
            ranges = self._lease(self.lease_units)
        except SecureStorageError as e:
            with self._cond:
                self._refilling = False
                self._cond.notify_all()
            logger.error(f"Counter lease failed: {e}")
            raise CounterExhaustedError(f"Could not lease IV counters: {e}") from e
        with self._cond:
            self._add(ranges)
            self._refilling = False
            self._cond.notify_all()
        logger.debug(f"Leased {sum(len(r) for r in ranges)} counters in {len(ranges)} ranges")

    def _refill_in_background(self) -> None:
        try:
            self._refill()
        except CounterExhaustedError:
            pass

    def take(self, count: int) -> List[int]:
        """
        Take `count` fresh counters atomically.

        Raises:
            CounterExhaustedError: If the pool is empty and no lease can be obtained
        """
        if count <= 0:
            raise ValueError("count must be positive")
        while True:
            with self._cond:
                if self._available() >= count:
                    counters = self._pop(count)
                    background = self._available() < self.watermark and not self._refilling
                    if background:
                        self._refilling = True
                    break
                if self._refilling:
                    self._cond.wait(REFILL_WAIT_S)
                    continue
                self._refilling = True
            self._refill()
        if background:
            threading.Thread(target=self._refill_in_background, name="counter-refill", daemon=True).start()
        return counters

    def drain_unused(self) -> List[Tuple[int, int]]:
        """Remove and return every unused range."""
        with self._cond:
            unused = [(cursor, end) for cursor, end in self._ranges if cursor < end]
            self._ranges.clear()
        return unused


@dataclass
class WriteRequest:
    device_id: bytes
    lba: int
    data: bytes

    def __post_init__(self):
        if self.lba < 0:
            raise GeometryError(f"Negative LBA {self.lba}")
        if not self.data or len(self.data) % SECTOR_BYTES:
            raise GeometryError(f"Write length {len(self.data)} is not a positive multiple of {SECTOR_BYTES}")

    @property
    def count(self) -> int:
        return len(self.data) // SECTOR_BYTES


@dataclass
class ReadRequest:
    device_id: bytes
    lba: int
    count: int

    def __post_init__(self):
        if self.lba < 0 or self.count <= 0:
            raise GeometryError(f"Invalid read of {self.count} sectors at {self.lba}")


@dataclass
class ReadResult:
    data: bytes
    unwritten: List[int] = field(default_factory=list)


@dataclass(eq=False)
class DeviceContext:
    """Per-device state of the local engine."""

    device_id: bytes
    geometry: DeviceGeometry
    channel: Channel
    session: SessionState
    keys: KeyHierarchy
    pool: CounterPool
    key_id: int = 0
    key_writes: int = 0
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)
    outstanding: Set[Future] = field(default_factory=set, repr=False)


class LocalEngine:
    """
    Compute-side engine: seals every sector with a leased counter and checks
    every returned sector against network freshness and its AEAD tag.
    """

    def __init__(
        self,
        tenant_id: str,
        lessee_id: str,
        kbs: KbsClient,
        config: LocalConfig = LocalConfig(),
        attestation: AttestationConfig = AttestationConfig(),
        suite: CipherSuite = DEFAULT_SUITE,
        workers: int = 4
    ):
        self.tenant_id = tenant_id
        self.lessee_id = lessee_id
        self.kbs = kbs
        self.config = config
        self.attestation = attestation
        self.suite = suite
        self._devices: Dict[bytes, DeviceContext] = {}
        self._executor = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="local-io")
        self.seal_trace: Optional[List[Tuple[bytes, int, int, int]]] = None
        self._trace_lock = threading.Lock()

    def _handshake(self, channel: Channel) -> SessionState:
        return client_handshake(
            channel,
            self.attestation.psk,
            self.attestation.local_measurement,
            self.attestation.remote_measurement,
            self.config.window_size,
            self.suite,
        )

    def attach_device(self, device_id: bytes, geometry: DeviceGeometry, channel: Channel) -> DeviceContext:
        """
        Provision keys for a device and attest to its remote instance.

        Args:
            device_id: Device identifier known to the KBS
            geometry: Layout of the remote device
            channel: Path to the remote engine serving the device

        Returns:
            The device context
        """
        device_id = bytes(device_id)
        keys = KeyHierarchy(device_key=self.kbs.provision(self.tenant_id, device_id), suite=self.suite)
        pool = CounterPool(
            lambda units: self.kbs.lease(device_id, self.lessee_id, units),
            self.config.lease_units,
            self.config.lease_watermark,
        )
        ctx = DeviceContext(device_id, geometry, channel, self._handshake(channel), keys, pool)
        self._devices[device_id] = ctx
        logger.info(f"Attached device {device_id.hex()} ({geometry.data_sector_count} data sectors)")
        return ctx

    def _context(self, device_id: bytes) -> DeviceContext:
        ctx = self._devices.get(bytes(device_id))
        if ctx is None:
            raise GeometryError(f"Device {bytes(device_id).hex()} is not attached")
        return ctx

    def _check_range(self, ctx: DeviceContext, lba: int, count: int) -> None:
        if lba + count > ctx.geometry.data_sector_count:
            raise GeometryError(
                f"Sectors [{lba}, {lba + count}) outside the {ctx.geometry.data_sector_count} data sectors"
            )

    def _session(self, ctx: DeviceContext) -> SessionState:
        with ctx.lock:
            if ctx.session.needs_roll(self.config.session_roll_margin):
                logger.info(f"Rolling session {ctx.session.session_id:#x} of {ctx.device_id.hex()}")
                ctx.session = self._handshake(ctx.channel)
            return ctx.session

    def _key_for(self, ctx: DeviceContext, count: int) -> int:
        with ctx.lock:
            if ctx.key_writes + count > self.config.key_write_budget:
                self._roll_key_locked(ctx)
            ctx.key_writes += count
            return ctx.key_id

    def _roll_key_locked(self, ctx: DeviceContext) -> None:
        limit = 2**LEGACY_KEY_ID_BITS if ctx.geometry.is_legacy else 2**32
        if ctx.key_id + 1 >= limit:
            raise CounterExhaustedError(f"Device {ctx.device_id.hex()} has no key ids left")
        ctx.key_id += 1
        ctx.key_writes = 0
        logger.info(f"Rolled data key of {ctx.device_id.hex()} to key id {ctx.key_id}")

    def roll_key(self, device_id: bytes) -> int:
        """Switch new writes of a device to the next key id; returns it."""
        ctx = self._context(device_id)
        with ctx.lock:
            self._roll_key_locked(ctx)
            return ctx.key_id

    def next_counter(self, device_id: bytes) -> int:
        return self._context(device_id).pool.take(1)[0]

    def write(self, request: WriteRequest) -> int:
        """
        Seal and send a run of sectors.

        Returns:
            Sectors acknowledged by the remote engine

        Raises:
            CounterExhaustedError: If no counters can be obtained; nothing is sent
            GeometryError: If the range leaves the device
        """
        ctx = self._context(request.device_id)
        count = request.count
        self._check_range(ctx, request.lba, count)

        counters = ctx.pool.take(count)
        key_id = self._key_for(ctx, count)
        key = ctx.keys.data_key(key_id)
        session = self._session(ctx)
        first_j = session.reserve(count)

        records = []
        for k, counter in enumerate(counters):
            sector = request.lba + k
            chunk = request.data[k * SECTOR_BYTES:(k + 1) * SECTOR_BYTES]
            ciphertext, tag = seal_sector(key, sector, counter, chunk, self.suite)
            j = first_j + k
            meta = SectorMetadata64(
                iv_counter=counter,
                key_id=key_id,
                aead_tag=tag,
                net_mac=network_mac(session.network_key, counter, j, self.suite),
                net_counter=j,
            )
            records.append((ciphertext, encode_metadata(meta)))
        if self.seal_trace is not None:
            with self._trace_lock:
                self.seal_trace.extend((ctx.device_id, key_id, request.lba + k, c) for k, c in enumerate(counters))

        frame = message_frame(FrameType.WRITE, session.session_id,
                              WriteBody(next_request_id(), request.lba, records))
        return expect(ctx.channel.request(frame), FrameType.ACK, AckBody).value

    def read(self, request: ReadRequest) -> ReadResult:
        """
        Fetch and verify a run of sectors.

        Unwritten sectors read as zeros and are listed in the result.

        Raises:
            NetworkFreshnessError: On a bad network MAC or a replayed counter
            IntegrityError: If a sector fails authentication
            FreshnessError: If the remote engine detected a stale sector
        """
        ctx = self._context(request.device_id)
        self._check_range(ctx, request.lba, request.count)
        session = self._session(ctx)
        request_id = next_request_id()
        frame = message_frame(FrameType.READ, session.session_id,
                              ReadBody(request_id, request.lba, request.count))
        body = expect(ctx.channel.request(frame), FrameType.READ_RESP, ReadRespBody)
        if body.request_id != request_id or body.start != request.lba or len(body.records) != request.count:
            raise ProtocolError("READ_RESP does not answer the request")

        metas = []
        for k, (_, raw) in enumerate(body.records):
            sector = request.lba + k
            meta = decode_metadata(raw)
            expected = network_mac(session.network_key, meta.iv_counter, meta.net_counter, self.suite)
            if not hmac.compare_digest(expected, meta.net_mac):
                raise NetworkFreshnessError(sector, "network MAC mismatch")
            if not session.window.check(meta.net_counter):
                raise NetworkFreshnessError(sector, f"replayed or stale counter {meta.net_counter}")
            metas.append(meta)

        plaintexts = []
        unwritten = []
        for k, ((ciphertext, _), meta) in enumerate(zip(body.records, metas)):
            sector = request.lba + k
            if meta.is_unwritten:
                plaintexts.append(bytes(SECTOR_BYTES))
                unwritten.append(sector)
                continue
            key = ctx.keys.data_key(meta.key_id)
            if ctx.geometry.is_legacy:
                plaintexts.append(open_sector_truncated(
                    key, sector, meta.iv_counter, ciphertext, meta.aead_tag[:LEGACY_TAG_BYTES], self.suite
                ))
            else:
                plaintexts.append(open_sector(key, sector, meta.iv_counter, ciphertext, meta.aead_tag, self.suite))
        return ReadResult(b"".join(plaintexts), unwritten)

    def _track(self, ctx: DeviceContext, future: Future) -> Future:
        with ctx.lock:
            ctx.outstanding.add(future)

        def done(f: Future) -> None:
            with ctx.lock:
                ctx.outstanding.discard(f)

        future.add_done_callback(done)
        return future

    def submit_write(self, request: WriteRequest) -> Future:
        return self._track(self._context(request.device_id), self._executor.submit(self.write, request))

    def submit_read(self, request: ReadRequest) -> Future:
        return self._track(self._context(request.device_id), self._executor.submit(self.read, request))

    def write_blocks(self, device_id: bytes, lba: int, data: bytes) -> int:
        return self.write(WriteRequest(bytes(device_id), lba, data))

    def read_blocks(self, device_id: bytes, lba: int, count: int) -> bytes:
        return self.read(ReadRequest(bytes(device_id), lba, count)).data

    def _wait_outstanding(self, ctx: DeviceContext) -> None:
        with ctx.lock:
            pending = list(ctx.outstanding)
        wait(pending)

    def _admin(self, ctx: DeviceContext, frame_type: FrameType, body) -> int:
        session = self._session(ctx)
        frame = message_frame(frame_type, session.session_id, body)
        return expect(ctx.channel.request(frame), FrameType.ACK, AckBody).value

    def flush(self, device_id: bytes) -> int:
        """
        Wait for submitted I/O and have the remote engine drain its journal.

        Returns:
            Journal entries still live on the remote side
        """
        ctx = self._context(device_id)
        self._wait_outstanding(ctx)
        return self._admin(ctx, FrameType.DRAIN, AdminBody(next_request_id()))

    def refresh(self, device_id: bytes, first_data_set: int, last_data_set: int) -> int:
        ctx = self._context(device_id)
        return self._admin(ctx, FrameType.REFRESH, RefreshBody(next_request_id(), first_data_set, last_data_set))

    def recover_remote(self, device_id: bytes) -> None:
        ctx = self._context(device_id)
        self._admin(ctx, FrameType.RECOVER, AdminBody(next_request_id()))

    def shutdown(self) -> None:
        """Wait for I/O, return unused counters to the KBS and forget all keys."""
        for ctx in list(self._devices.values()):
            self._wait_outstanding(ctx)
            unused = ctx.pool.drain_unused()
            if unused:
                try:
                    returned = self.kbs.return_ranges(ctx.device_id, self.lessee_id, unused)
                    logger.info(f"Returned {returned} unused counters of {ctx.device_id.hex()}")
                except SecureStorageError as e:
                    logger.warning(f"Could not return counters of {ctx.device_id.hex()}: {e}")
            ctx.channel.close()
        self._devices.clear()
        self._executor.shutdown(wait=True)
        logger.info(f"Local engine '{self.lessee_id}' shut down")
