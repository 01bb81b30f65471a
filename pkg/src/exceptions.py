"""Custom exceptions for the secure storage stack."""

from typing import Optional


class SecureStorageError(Exception):
    """Base exception for all stack errors."""
    pass


class ConfigError(SecureStorageError):
    """Raised when a configuration value is invalid."""
    pass


class GeometryError(SecureStorageError):
    """Raised when a device geometry or sector index is invalid."""
    pass


class MetadataFormatError(SecureStorageError):
    """Raised when per-sector or aggregated metadata cannot be encoded or decoded."""
    pass


class CryptoError(SecureStorageError):
    """Base exception for cryptographic failures."""
    pass


class NonceRangeError(CryptoError):
    """Raised when a sector number or counter does not fit its nonce field."""
    pass


class IntegrityError(CryptoError):
    """Raised when AEAD authentication of a sector fails."""

    def __init__(self, sector: int, message: Optional[str] = None):
        self.sector = sector
        super().__init__(message or f"Integrity check failed for sector {sector}")


class FreshnessError(SecureStorageError):
    """Raised when a sector's IV disagrees with the freshness tree."""

    def __init__(self, sector: int, message: Optional[str] = None):
        self.sector = sector
        super().__init__(message or f"Freshness check failed for sector {sector}")


class FreshnessViolationError(SecureStorageError):
    """Raised when crash recovery finds disk or NV state inconsistent with the persisted root."""
    pass


class NetworkFreshnessError(SecureStorageError):
    """Raised when a frame fails the network MAC or the anti-replay window."""

    def __init__(self, sector: int, reason: str):
        self.sector = sector
        self.reason = reason
        super().__init__(f"Network freshness check failed for sector {sector}: {reason}")


class CounterExhaustedError(SecureStorageError):
    """Raised when no IV counters are available and none can be leased."""
    pass


class KbsError(SecureStorageError):
    """Base exception for key broker failures."""
    pass


class LedgerError(KbsError):
    """Raised on invalid lease or return operations."""
    pass


class AuthenticationError(KbsError):
    """Raised when a key request arrives without an authenticated session."""
    pass


class UnknownTenantError(KbsError):
    """Raised when a tenant is not registered with the broker."""
    pass


class UnknownDeviceError(KbsError):
    """Raised when a device is not registered with the broker."""
    pass


class DeviceError(SecureStorageError):
    """Base exception for simulated device failures."""
    pass


class DeviceCrashedError(DeviceError):
    """Raised for I/O submitted after a scheduled crash point."""
    pass


class OutOfRangeError(DeviceError):
    """Raised for sector indices outside the device."""
    pass


class TransportError(SecureStorageError):
    """Base exception for transport failures."""
    pass


class ProtocolError(TransportError):
    """Raised when a frame is malformed or unexpected."""
    pass


class HandshakeError(TransportError):
    """Raised when mutual attestation fails."""
    pass


class RemoteRejectError(TransportError):
    """Raised when the peer answers with a REJECT frame that maps to no local error class."""

    def __init__(self, code: int, sector: int, message: str):
        self.code = code
        self.sector = sector
        super().__init__(f"Remote rejected request (code {code}, sector {sector}): {message}")


class JournalFullError(SecureStorageError):
    """Raised when the NV journal has no free slot even after a drain."""
    pass


class BenchmarkError(SecureStorageError):
    """Raised when a benchmark run observes a verification failure."""
    pass


class ExportError(SecureStorageError):
    """Raised when benchmark results cannot be written."""
    pass
