"""Wire protocol: frames, message bodies, mocked attestation handshake and channels."""

import hmac
import itertools
import secrets
import socket
import socketserver
import struct
import threading
from abc import ABC, abstractmethod
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, ClassVar, Dict, List, Optional, Protocol, Sequence, Tuple

from .config import (
    PROTOCOL_MAGIC,
    PROTOCOL_VERSION,
    NET_COUNTER_BITS,
    SECTOR_BYTES,
    METADATA_BYTES,
    WINDOW_SIZE,
    DEFAULT_HOST,
)
from .crypto import CipherSuite, DEFAULT_SUITE, KEY_BYTES
from .exceptions import (
    AuthenticationError,
    ConfigError,
    CounterExhaustedError,
    DeviceError,
    FreshnessError,
    FreshnessViolationError,
    GeometryError,
    HandshakeError,
    IntegrityError,
    JournalFullError,
    KbsError,
    LedgerError,
    MetadataFormatError,
    NetworkFreshnessError,
    ProtocolError,
    RemoteRejectError,
    SecureStorageError,
    TransportError,
    UnknownDeviceError,
    UnknownTenantError,
)
from .logger import setup_logger
from .window import ReplayWindow

logger = setup_logger(__name__)

# magic | version | type | session id | body length
_HEADER = struct.Struct("<4sBBQI")
HEADER_BYTES = _HEADER.size
MAX_BODY_BYTES = 64 * 1024 * 1024
WIRE_RECORD_BYTES = SECTOR_BYTES + METADATA_BYTES
NONCE_BYTES = 16

Record = Tuple[bytes, bytes]


class FrameType(IntEnum):
    HELLO = 1
    ATTEST = 2
    WRITE = 3
    READ = 4
    READ_RESP = 5
    ACK = 6
    REJECT = 7
    LEASE = 8
    RETURN = 9
    KEY = 10
    DRAIN = 11
    RECOVER = 12
    REGISTER = 13
    REFRESH = 14


@dataclass(frozen=True)
class Frame:
    type: FrameType
    session_id: int
    body: bytes = b""

    @property
    def request_id(self) -> int:
        if len(self.body) < 8:
            raise ProtocolError(f"{self.type.name} frame body has no request id")
        return int.from_bytes(self.body[:8], "little")


def encode_frame(frame: Frame) -> bytes:
    if len(frame.body) > MAX_BODY_BYTES:
        raise ProtocolError(f"Frame body of {len(frame.body)} bytes exceeds the limit")
    return _HEADER.pack(
        PROTOCOL_MAGIC, PROTOCOL_VERSION, frame.type, frame.session_id, len(frame.body)
    ) + frame.body


def _parse_header(header: bytes) -> Tuple[FrameType, int, int]:
    magic, version, frame_type, session_id, length = _HEADER.unpack(header)
    if magic != PROTOCOL_MAGIC:
        raise ProtocolError(f"Bad frame magic {magic!r}")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"Unsupported protocol version {version}")
    try:
        frame_type = FrameType(frame_type)
    except ValueError as e:
        raise ProtocolError(f"Unknown frame type {frame_type}") from e
    if length > MAX_BODY_BYTES:
        raise ProtocolError(f"Frame body of {length} bytes exceeds the limit")
    return frame_type, session_id, length


def decode_frame(data: bytes) -> Frame:
    """
    Parse exactly one encoded frame.

    Raises:
        ProtocolError: On a bad header or a length that does not match the data
    """
    data = bytes(data)
    if len(data) < HEADER_BYTES:
        raise ProtocolError(f"Frame of {len(data)} bytes is shorter than its header")
    frame_type, session_id, length = _parse_header(data[:HEADER_BYTES])
    if len(data) != HEADER_BYTES + length:
        raise ProtocolError(
            f"Frame length field says {length} body bytes, got {len(data) - HEADER_BYTES}"
        )
    return Frame(frame_type, session_id, data[HEADER_BYTES:])


def _recv_exact(sock: socket.socket, size: int) -> Optional[bytes]:
    chunks = []
    remaining = size
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            if remaining == size:
                return None
            raise ProtocolError("Connection closed inside a frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Optional[Frame]:
    """Read one frame from a stream socket; None on a clean end of stream."""
    header = _recv_exact(sock, HEADER_BYTES)
    if header is None:
        return None
    frame_type, session_id, length = _parse_header(header)
    body = _recv_exact(sock, length) if length else b""
    if body is None:
        raise ProtocolError("Connection closed inside a frame")
    return Frame(frame_type, session_id, body)


# -- message bodies --------------------------------------------------------

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_RANGE = struct.Struct("<QQ")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise ProtocolError("Truncated message body")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))


def _encode_field(kind: str, value, out: List[bytes]) -> None:
    if kind == "u16":
        out.append(_U16.pack(value))
    elif kind == "u32":
        out.append(_U32.pack(value))
    elif kind == "u64":
        out.append(_U64.pack(value))
    elif kind in ("bytes", "str"):
        raw = value.encode() if kind == "str" else bytes(value)
        out.append(_U32.pack(len(raw)) + raw)
    elif kind == "records":
        out.append(_U32.pack(len(value)))
        for data, meta in value:
            if len(data) != SECTOR_BYTES or len(meta) != METADATA_BYTES:
                raise ProtocolError("Wire records carry one sector and 64 bytes of metadata")
            out.append(bytes(data))
            out.append(bytes(meta))
    elif kind == "ranges":
        out.append(_U32.pack(len(value)))
        out.extend(_RANGE.pack(start, end) for start, end in value)
    else:
        raise ProtocolError(f"Unknown field kind {kind}")


def _decode_field(kind: str, reader: _Reader):
    if kind == "u16":
        return reader.unpack(_U16)[0]
    if kind == "u32":
        return reader.unpack(_U32)[0]
    if kind == "u64":
        return reader.unpack(_U64)[0]
    if kind in ("bytes", "str"):
        (length,) = reader.unpack(_U32)
        raw = reader.take(length)
        if kind == "bytes":
            return raw
        try:
            return raw.decode()
        except UnicodeDecodeError as e:
            raise ProtocolError("String field is not UTF-8") from e
    if kind == "records":
        (count,) = reader.unpack(_U32)
        records = []
        for _ in range(count):
            record = reader.take(WIRE_RECORD_BYTES)
            records.append((record[:SECTOR_BYTES], record[SECTOR_BYTES:]))
        return records
    if kind == "ranges":
        (count,) = reader.unpack(_U32)
        return [reader.unpack(_RANGE) for _ in range(count)]
    raise ProtocolError(f"Unknown field kind {kind}")


@dataclass
class Message:
    """
    Base of all frame bodies. Subclasses list their wire layout in SCHEMA as
    (field, kind) pairs; every body starts with the u64 request id.
    """

    SCHEMA: ClassVar[Tuple[Tuple[str, str], ...]] = ()

    def encode(self) -> bytes:
        out: List[bytes] = []
        try:
            for name, kind in self.SCHEMA:
                _encode_field(kind, getattr(self, name), out)
        except struct.error as e:
            raise ProtocolError(f"{type(self).__name__} field out of range: {e}") from e
        return b"".join(out)

    @classmethod
    def decode(cls, body: bytes):
        reader = _Reader(bytes(body))
        values = {name: _decode_field(kind, reader) for name, kind in cls.SCHEMA}
        if reader.pos != len(reader.data):
            raise ProtocolError(f"{cls.__name__} body has {len(reader.data) - reader.pos} trailing bytes")
        return cls(**values)


@dataclass
class HelloBody(Message):
    SCHEMA = (("request_id", "u64"), ("measurement", "bytes"), ("nonce", "bytes"), ("start_counter", "u64"))
    request_id: int
    measurement: bytes
    nonce: bytes
    start_counter: int


@dataclass
class AttestBody(Message):
    SCHEMA = HelloBody.SCHEMA + (("proof", "bytes"),)
    request_id: int
    measurement: bytes
    nonce: bytes
    start_counter: int
    proof: bytes


@dataclass
class WriteBody(Message):
    SCHEMA = (("request_id", "u64"), ("start", "u64"), ("records", "records"))
    request_id: int
    start: int
    records: List[Record]


@dataclass
class ReadBody(Message):
    SCHEMA = (("request_id", "u64"), ("start", "u64"), ("count", "u32"))
    request_id: int
    start: int
    count: int


@dataclass
class ReadRespBody(Message):
    SCHEMA = WriteBody.SCHEMA
    request_id: int
    start: int
    records: List[Record]


@dataclass
class AckBody(Message):
    SCHEMA = (("request_id", "u64"), ("value", "u64"))
    request_id: int
    value: int = 0


@dataclass
class RejectBody(Message):
    SCHEMA = (("request_id", "u64"), ("code", "u16"), ("sector", "u64"), ("message", "str"))
    request_id: int
    code: int
    sector: int
    message: str


@dataclass
class LeaseRequestBody(Message):
    SCHEMA = (("request_id", "u64"), ("device_id", "bytes"), ("lessee_id", "str"), ("units", "u64"))
    request_id: int
    device_id: bytes
    lessee_id: str
    units: int


@dataclass
class LeaseGrantBody(Message):
    SCHEMA = (("request_id", "u64"), ("device_id", "bytes"), ("ranges", "ranges"))
    request_id: int
    device_id: bytes
    ranges: List[Tuple[int, int]]


@dataclass
class ReturnBody(Message):
    SCHEMA = (("request_id", "u64"), ("device_id", "bytes"), ("lessee_id", "str"), ("ranges", "ranges"))
    request_id: int
    device_id: bytes
    lessee_id: str
    ranges: List[Tuple[int, int]]


@dataclass
class KeyRequestBody(Message):
    SCHEMA = (("request_id", "u64"), ("tenant_id", "str"), ("device_id", "bytes"))
    request_id: int
    tenant_id: str
    device_id: bytes


@dataclass
class KeyResponseBody(Message):
    SCHEMA = (("request_id", "u64"), ("nonce", "bytes"), ("wrapped", "bytes"))
    request_id: int
    nonce: bytes
    wrapped: bytes


@dataclass
class RegisterBody(Message):
    SCHEMA = (("request_id", "u64"), ("device_id", "bytes"))
    request_id: int
    device_id: bytes


@dataclass
class RefreshBody(Message):
    SCHEMA = (("request_id", "u64"), ("first_data_set", "u64"), ("last_data_set", "u64"))
    request_id: int
    first_data_set: int
    last_data_set: int


@dataclass
class AdminBody(Message):
    SCHEMA = (("request_id", "u64"),)
    request_id: int


_request_ids = itertools.count(1)


def next_request_id() -> int:
    return next(_request_ids)


def message_frame(frame_type: FrameType, session_id: int, message: Message) -> Frame:
    return Frame(frame_type, session_id, message.encode())


def expect(frame: Frame, frame_type: FrameType, message_cls):
    """
    Decode a response body, turning REJECT frames into local exceptions.

    Raises:
        The mapped error of a REJECT, or ProtocolError on an unexpected type
    """
    if frame.type == FrameType.REJECT:
        raise error_from_reject(RejectBody.decode(frame.body))
    if frame.type != frame_type:
        raise ProtocolError(f"Expected {frame_type.name}, got {frame.type.name}")
    return message_cls.decode(frame.body)


# -- reject codes ----------------------------------------------------------

class RejectCode(IntEnum):
    INTERNAL = 1
    PROTOCOL = 2
    HANDSHAKE = 3
    NETWORK_FRESHNESS = 4
    FRESHNESS = 5
    FRESHNESS_VIOLATION = 6
    INTEGRITY = 7
    JOURNAL_FULL = 8
    DEVICE = 9
    GEOMETRY = 10
    METADATA = 11
    LEDGER = 12
    AUTHENTICATION = 13
    UNKNOWN_TENANT = 14
    UNKNOWN_DEVICE = 15
    COUNTER_EXHAUSTED = 16
    KBS = 17
    CONFIG = 18


# most specific classes first
_ERROR_CODES: Sequence[Tuple[type, RejectCode]] = (
    (NetworkFreshnessError, RejectCode.NETWORK_FRESHNESS),
    (FreshnessViolationError, RejectCode.FRESHNESS_VIOLATION),
    (FreshnessError, RejectCode.FRESHNESS),
    (IntegrityError, RejectCode.INTEGRITY),
    (JournalFullError, RejectCode.JOURNAL_FULL),
    (HandshakeError, RejectCode.HANDSHAKE),
    (ProtocolError, RejectCode.PROTOCOL),
    (DeviceError, RejectCode.DEVICE),
    (GeometryError, RejectCode.GEOMETRY),
    (MetadataFormatError, RejectCode.METADATA),
    (LedgerError, RejectCode.LEDGER),
    (AuthenticationError, RejectCode.AUTHENTICATION),
    (UnknownTenantError, RejectCode.UNKNOWN_TENANT),
    (UnknownDeviceError, RejectCode.UNKNOWN_DEVICE),
    (CounterExhaustedError, RejectCode.COUNTER_EXHAUSTED),
    (KbsError, RejectCode.KBS),
    (ConfigError, RejectCode.CONFIG),
)

_SECTOR_ERRORS = (NetworkFreshnessError, FreshnessError, IntegrityError)


def reject_frame(error: BaseException, request_id: int, session_id: int = 0) -> Frame:
    """Encode an error as a REJECT frame."""
    code = RejectCode.INTERNAL
    for cls, mapped in _ERROR_CODES:
        if isinstance(error, cls):
            code = mapped
            break
    sector = getattr(error, "sector", 0) if isinstance(error, _SECTOR_ERRORS) else 0
    body = RejectBody(request_id, code, sector, str(error))
    return message_frame(FrameType.REJECT, session_id, body)


def error_from_reject(body: RejectBody) -> SecureStorageError:
    """Rebuild the local exception for a REJECT body."""
    try:
        code = RejectCode(body.code)
    except ValueError:
        return RemoteRejectError(body.code, body.sector, body.message)
    if code == RejectCode.NETWORK_FRESHNESS:
        return NetworkFreshnessError(body.sector, body.message)
    if code == RejectCode.FRESHNESS:
        return FreshnessError(body.sector, body.message)
    if code == RejectCode.INTEGRITY:
        return IntegrityError(body.sector, body.message)
    for cls, mapped in _ERROR_CODES:
        if mapped == code:
            return cls(body.message)
    return RemoteRejectError(body.code, body.sector, body.message)


# -- sessions and handshake ------------------------------------------------

@dataclass(eq=False)
class SessionState:
    """
    One attested session as seen by one side.

    send_counter is the next network counter this side stamps on outgoing
    records; window checks the counters received from the peer.
    """

    session_id: int
    network_key: bytes
    send_counter: int
    window: ReplayWindow
    peer_measurement: bytes = b""
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def reserve(self, count: int) -> int:
        """
        Take `count` consecutive outgoing counters.

        Returns:
            The first reserved counter

        Raises:
            TransportError: If the 48-bit counter space is used up
        """
        with self._lock:
            first = self.send_counter
            if first + count > 2**NET_COUNTER_BITS:
                raise TransportError(f"Session {self.session_id:#x} has exhausted its network counters")
            self.send_counter = first + count
            return first

    def remaining(self) -> int:
        return 2**NET_COUNTER_BITS - self.send_counter

    def needs_roll(self, margin: int) -> bool:
        return self.remaining() <= margin


def _start_counter() -> int:
    # the lower half of the space leaves room for 2^47 frames per session
    return secrets.randbelow(2**(NET_COUNTER_BITS - 1))


def _proof(psk: bytes, role: bytes, nonce_c: bytes, nonce_s: bytes, measurement: bytes,
           start: int, session_id: int, suite: CipherSuite) -> bytes:
    message = (
        role + nonce_c + nonce_s + measurement
        + start.to_bytes(8, "little") + session_id.to_bytes(8, "little")
    )
    return suite.mac(psk, message)


def _network_key(psk: bytes, nonce_c: bytes, nonce_s: bytes, session_id: int,
                 suite: CipherSuite) -> bytes:
    return suite.mac(psk, b"k_net" + nonce_c + nonce_s + session_id.to_bytes(8, "little"), KEY_BYTES)


class FrameHandler(Protocol):
    def handle(self, frame: Frame) -> Frame: ...


class Channel(ABC):
    """Request/response path to one peer; responses echo the request id."""

    @abstractmethod
    def request(self, frame: Frame) -> Frame:
        ...

    def close(self) -> None:
        pass


def client_handshake(
    channel: Channel,
    psk: bytes,
    own_measurement: bytes,
    expected_peer: bytes,
    window_size: int = WINDOW_SIZE,
    suite: CipherSuite = DEFAULT_SUITE
) -> SessionState:
    """
    Run the client side of the mocked mutual attestation.

    HELLO carries our measurement, nonce and start counter; the server answers
    ATTEST with its own plus a proof over both nonces; our ATTEST proves
    possession of the pre-shared key in turn and is acknowledged.

    Returns:
        The established session

    Raises:
        HandshakeError: If the peer's measurement or proof is wrong
    """
    nonce_c = secrets.token_bytes(NONCE_BYTES)
    start_c = _start_counter()
    hello = HelloBody(next_request_id(), own_measurement, nonce_c, start_c)
    response = channel.request(message_frame(FrameType.HELLO, 0, hello))
    reply = expect(response, FrameType.ATTEST, AttestBody)
    session_id = response.session_id
    if reply.measurement != expected_peer:
        raise HandshakeError("Peer measurement does not match the expected value")
    expected_proof = _proof(psk, b"server", nonce_c, reply.nonce, reply.measurement,
                            reply.start_counter, session_id, suite)
    if not hmac.compare_digest(expected_proof, reply.proof):
        raise HandshakeError("Peer attestation proof is invalid")

    proof_c = _proof(psk, b"client", nonce_c, reply.nonce, own_measurement, start_c, session_id, suite)
    attest = AttestBody(next_request_id(), own_measurement, nonce_c, start_c, proof_c)
    expect(channel.request(message_frame(FrameType.ATTEST, session_id, attest)), FrameType.ACK, AckBody)

    session = SessionState(
        session_id=session_id,
        network_key=_network_key(psk, nonce_c, reply.nonce, session_id, suite),
        send_counter=start_c,
        window=ReplayWindow(reply.start_counter, window_size),
        peer_measurement=reply.measurement,
    )
    logger.info(f"Established session {session_id:#x}")
    return session


class HandshakeResponder:
    """
    Server side of the handshake, shared by the remote engine and the KBS.

    Sessions live here once established; `on_established` lets the owner react
    (the KBS marks the session authenticated).
    """

    def __init__(
        self,
        psk: bytes,
        own_measurement: bytes,
        expected_peer: bytes,
        window_size: int = WINDOW_SIZE,
        suite: CipherSuite = DEFAULT_SUITE,
        on_established: Optional[Callable[[SessionState], None]] = None
    ):
        self.psk = psk
        self.own_measurement = own_measurement
        self.expected_peer = expected_peer
        self.window_size = window_size
        self.suite = suite
        self.on_established = on_established
        self._pending: Dict[int, Tuple[bytes, bytes, int]] = {}
        self._sessions: Dict[int, SessionState] = {}
        self._lock = threading.Lock()

    def handle_hello(self, frame: Frame) -> Frame:
        hello = HelloBody.decode(frame.body)
        if hello.measurement != self.expected_peer:
            logger.warning("Rejected HELLO with an unexpected measurement")
            raise HandshakeError("Peer measurement does not match the expected value")
        if len(hello.nonce) != NONCE_BYTES:
            raise HandshakeError("Handshake nonce has the wrong length")

        nonce_s = secrets.token_bytes(NONCE_BYTES)
        start_s = _start_counter()
        with self._lock:
            session_id = secrets.randbits(64) or 1
            while session_id in self._sessions or session_id in self._pending:
                session_id = secrets.randbits(64) or 1
            self._pending[session_id] = (hello.nonce, nonce_s, start_s)

        proof = _proof(self.psk, b"server", hello.nonce, nonce_s, self.own_measurement,
                       start_s, session_id, self.suite)
        body = AttestBody(hello.request_id, self.own_measurement, nonce_s, start_s, proof)
        return message_frame(FrameType.ATTEST, session_id, body)

    def handle_attest(self, frame: Frame) -> Frame:
        attest = AttestBody.decode(frame.body)
        with self._lock:
            pending = self._pending.pop(frame.session_id, None)
        if pending is None:
            raise HandshakeError(f"No handshake in progress for session {frame.session_id:#x}")
        nonce_c, nonce_s, start_s = pending
        if attest.nonce != nonce_c or attest.measurement != self.expected_peer:
            raise HandshakeError("ATTEST does not match its HELLO")
        expected = _proof(self.psk, b"client", nonce_c, nonce_s, attest.measurement,
                          attest.start_counter, frame.session_id, self.suite)
        if not hmac.compare_digest(expected, attest.proof):
            logger.warning(f"Invalid client proof for session {frame.session_id:#x}")
            raise HandshakeError("Peer attestation proof is invalid")

        session = SessionState(
            session_id=frame.session_id,
            network_key=_network_key(self.psk, nonce_c, nonce_s, frame.session_id, self.suite),
            send_counter=start_s,
            window=ReplayWindow(attest.start_counter, self.window_size),
            peer_measurement=attest.measurement,
        )
        with self._lock:
            self._sessions[session.session_id] = session
        if self.on_established is not None:
            self.on_established(session)
        logger.info(f"Accepted session {session.session_id:#x}")
        return message_frame(FrameType.ACK, session.session_id, AckBody(attest.request_id))

    def session(self, session_id: int) -> SessionState:
        """
        Raises:
            HandshakeError: If the session was never established
        """
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise HandshakeError(f"Unknown session {session_id:#x}")
        return session

    def close_session(self, session_id: int) -> None:
        with self._lock:
            self._sessions.pop(session_id, None)


def handle_safely(handler: FrameHandler, frame: Frame) -> Frame:
    """Run a handler, answering any failure with a REJECT frame."""
    try:
        return handler.handle(frame)
    except SecureStorageError as e:
        logger.warning(f"Rejecting {frame.type.name}: {e}")
        request_id = frame.request_id if len(frame.body) >= 8 else 0
        return reject_frame(e, request_id, frame.session_id)
    except Exception as e:
        logger.exception(f"Handler failed on {frame.type.name}")
        request_id = frame.request_id if len(frame.body) >= 8 else 0
        return reject_frame(e, request_id, frame.session_id)


class InProcessChannel(Channel):
    """Direct call into a handler; both directions still pass through the codec."""

    def __init__(self, handler: FrameHandler):
        self.handler = handler

    def request(self, frame: Frame) -> Frame:
        delivered = decode_frame(encode_frame(frame))
        response = handle_safely(self.handler, delivered)
        return decode_frame(encode_frame(response))


class SocketChannel(Channel):
    """
    Full-duplex TCP channel: requests are written as they are issued and a
    reader thread completes the waiting future whose request id matches.
    """

    def __init__(self, host: str = DEFAULT_HOST, port: int = 0, timeout: float = 30.0):
        self.timeout = timeout
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as e:
            logger.error(f"Failed to connect to {host}:{port}: {e}")
            raise TransportError(f"Failed to connect to {host}:{port}: {e}") from e
        self._sock.settimeout(None)
        self._send_lock = threading.Lock()
        self._pending: Dict[int, Future] = {}
        self._pending_lock = threading.Lock()
        self._failure: Optional[TransportError] = None
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop, name="snvme-reader", daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        error = TransportError("Connection closed")
        try:
            while True:
                frame = read_frame(self._sock)
                if frame is None:
                    break
                with self._pending_lock:
                    future = self._pending.pop(frame.request_id, None)
                if future is None:
                    logger.warning(f"Dropping {frame.type.name} for unknown request {frame.request_id}")
                    continue
                future.set_result(frame)
        except (OSError, ProtocolError) as e:
            if not self._closed:
                logger.error(f"Channel reader stopped: {e}")
            error = TransportError(f"Connection failed: {e}")
        with self._pending_lock:
            self._failure = error
            pending, self._pending = self._pending, {}
        for future in pending.values():
            future.set_exception(error)

    def request(self, frame: Frame) -> Frame:
        """
        Send a frame and wait for the response with the same request id.

        Raises:
            TransportError: On a send failure, a timeout, or a connection whose reader has stopped
        """
        future: Future = Future()
        with self._pending_lock:
            if self._failure is not None:
                raise TransportError(f"Channel is down: {self._failure}")
            self._pending[frame.request_id] = future
        try:
            with self._send_lock:
                self._sock.sendall(encode_frame(frame))
        except OSError as e:
            with self._pending_lock:
                self._pending.pop(frame.request_id, None)
            raise TransportError(f"Send failed: {e}") from e
        try:
            return future.result(timeout=self.timeout)
        except TimeoutError as e:
            raise TransportError(f"No response to request {frame.request_id}") from e

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class _ConnectionHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        server: FrameServer = self.server  # type: ignore[assignment]
        write_lock = threading.Lock()

        def respond(frame: Frame) -> None:
            response = handle_safely(server.frame_handler, frame)
            with write_lock:
                self.request.sendall(encode_frame(response))

        with ThreadPoolExecutor(max_workers=server.workers) as executor:
            while True:
                try:
                    frame = read_frame(self.request)
                except (OSError, ProtocolError) as e:
                    logger.warning(f"Closing connection from {self.client_address}: {e}")
                    return
                if frame is None:
                    return
                executor.submit(respond, frame)


class FrameServer(socketserver.ThreadingTCPServer):
    """TCP server dispatching every frame of every connection to one handler."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, handler: FrameHandler, host: str = DEFAULT_HOST, port: int = 0, workers: int = 8):
        self.frame_handler = handler
        self.workers = workers
        self._thread: Optional[threading.Thread] = None
        super().__init__((host, port), _ConnectionHandler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self) -> "FrameServer":
        self._thread = threading.Thread(target=self.serve_forever, name="snvme-server", daemon=True)
        self._thread.start()
        logger.info(f"Serving frames on {self.server_address[0]}:{self.port}")
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()
