"""Configuration settings for the secure storage stack."""

import os

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional

from .exceptions import ConfigError

# Project paths
PROJECT_ROOT = Path(__file__).parent.parent
DATA_DIR = PROJECT_ROOT / "data"
DEVICE_DIR = DATA_DIR / "devices"
RESULTS_DIR = DATA_DIR / "results"
LOGS_DIR = PROJECT_ROOT / "logs"
TESTDATA_DIR = PROJECT_ROOT / "testdata"

# Ensure directories exist
for directory in [DEVICE_DIR, RESULTS_DIR, LOGS_DIR]:
    directory.mkdir(parents=True, exist_ok=True)

# Device layout
SECTOR_BYTES = 4096
METADATA_BYTES = 64
LEGACY_METADATA_BYTES = 16
DATA_SET_SIZE = 340  # IVs per aggregated metadata sector

# Hazel Merkle Tree
TREE_BRANCHING = 16
NODE_BYTES = 16
HASHER_COUNT = 3

# Remote engine
IV_CACHE_CAPACITY = 1024  # cache lines (one per data set)
JOURNAL_CAPACITY = 512  # eventual-consistency entries held in NV memory
FLUSH_WATERMARK = 0.5  # journal fill at which settled cache lines are written back in the background
FLUSHER_COUNT = 4
WINDOW_SIZE = 1024  # anti-replay window T
REFRESH_ON_FULL_PATH = False

# Counter leasing
COUNTER_BITS = 58
SECTOR_BITS = 38
NET_COUNTER_BITS = 48
LEASE_UNITS = 2**40 // SECTOR_BYTES  # "1TB" of sector writes
LEASE_WATERMARK = LEASE_UNITS // 8
SESSION_ROLL_MARGIN = 2**20  # re-handshake this many frames before j wraps
KEY_WRITE_BUDGET = 2**40  # sector writes per key id before rolling

# Cipher suite defaults
AEAD_ALGORITHM = "aes-256-gcm"
HASH_ALGORITHM = "blake3"

# Transport
PROTOCOL_MAGIC = b"sNVM"
PROTOCOL_VERSION = 1
KBS_PORT = 4790
REMOTE_PORT = 4791
DEFAULT_HOST = "127.0.0.1"

# Mocked attestation: pre-shared test credentials
ATTESTATION_PSK = b"snvme-test-attestation-psk-00001"
LOCAL_MEASUREMENT = b"local-instance-measurement-v1"
REMOTE_MEASUREMENT = b"remote-instance-measurement-v1"
KBS_MEASUREMENT = b"kbs-measurement-v1"

# Logging configuration
LOG_LEVEL = os.environ.get("SNVME_LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_FILE = LOGS_DIR / "snvme.log"


@dataclass(frozen=True)
class DeviceConfig:
    total_sectors: int = 16384
    sector_bytes: int = SECTOR_BYTES
    metadata_bytes: int = METADATA_BYTES
    data_set_size: int = DATA_SET_SIZE
    device_delay_us: float = 0.0


@dataclass(frozen=True)
class RemoteConfig:
    tree_branching: int = TREE_BRANCHING
    hasher_count: int = HASHER_COUNT
    cache_capacity: int = IV_CACHE_CAPACITY
    journal_capacity: int = JOURNAL_CAPACITY
    flush_watermark: float = FLUSH_WATERMARK
    flusher_count: int = FLUSHER_COUNT
    window_size: int = WINDOW_SIZE
    eventual_consistency: bool = True
    refresh_on_full_path: bool = REFRESH_ON_FULL_PATH
    port: int = REMOTE_PORT


@dataclass(frozen=True)
class LocalConfig:
    lease_units: int = LEASE_UNITS
    lease_watermark: int = LEASE_WATERMARK
    key_write_budget: int = KEY_WRITE_BUDGET
    window_size: int = WINDOW_SIZE
    session_roll_margin: int = SESSION_ROLL_MARGIN


@dataclass(frozen=True)
class KbsConfig:
    state_file: Optional[str] = None
    port: int = KBS_PORT


@dataclass(frozen=True)
class SuiteConfig:
    aead: str = AEAD_ALGORITHM
    hash: str = HASH_ALGORITHM


@dataclass(frozen=True)
class AttestationConfig:
    psk: bytes = ATTESTATION_PSK
    local_measurement: bytes = LOCAL_MEASUREMENT
    remote_measurement: bytes = REMOTE_MEASUREMENT
    kbs_measurement: bytes = KBS_MEASUREMENT


@dataclass(frozen=True)
class StackConfig:
    """All tunables of one deployment, grouped per component."""

    device: DeviceConfig = field(default_factory=DeviceConfig)
    remote: RemoteConfig = field(default_factory=RemoteConfig)
    local: LocalConfig = field(default_factory=LocalConfig)
    kbs: KbsConfig = field(default_factory=KbsConfig)
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    attestation: AttestationConfig = field(default_factory=AttestationConfig)

    def validate(self) -> "StackConfig":
        """
        Check cross-field constraints.

        Returns:
            self, for chaining

        Raises:
            ConfigError: If any value is out of its supported range
        """
        dev = self.device
        if dev.sector_bytes != SECTOR_BYTES:
            raise ConfigError(f"Only {SECTOR_BYTES}B sectors are supported, got {dev.sector_bytes}")
        if dev.metadata_bytes not in (METADATA_BYTES, LEGACY_METADATA_BYTES):
            raise ConfigError(f"metadata_bytes must be 16 or 64, got {dev.metadata_bytes}")
        if dev.total_sectors <= dev.data_set_size:
            raise ConfigError("Device must hold more sectors than one data set")
        if self.remote.journal_capacity < dev.data_set_size:
            raise ConfigError("journal_capacity must be at least data_set_size")
        if self.remote.window_size < 1 or self.local.window_size < 1:
            raise ConfigError("window_size must be positive")
        if self.remote.hasher_count < 1 or self.remote.cache_capacity < 1:
            raise ConfigError("hasher_count and cache_capacity must be positive")
        if self.remote.flusher_count < 1:
            raise ConfigError("flusher_count must be positive")
        if not 0.0 < self.remote.flush_watermark <= 1.0:
            raise ConfigError(f"flush_watermark must be in (0, 1], got {self.remote.flush_watermark}")
        if self.remote.tree_branching < 2:
            raise ConfigError("tree_branching must be at least 2")
        if self.local.lease_units < 1:
            raise ConfigError("lease_units must be positive")
        return self


_SECTIONS = {
    "device": DeviceConfig,
    "remote": RemoteConfig,
    "local": LocalConfig,
    "kbs": KbsConfig,
    "suite": SuiteConfig,
    "attestation": AttestationConfig,
}


def _coerce_section(cls: type, values: Dict[str, Any]) -> Dict[str, Any]:
    known = {f.name: f for f in fields(cls)}
    coerced = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"Unknown key '{key}' in [{cls.__name__}]")
        # attestation blobs are written as strings in TOML
        if known[key].type in (bytes, "bytes") and isinstance(value, str):
            value = value.encode()
        coerced[key] = value
    return coerced


def load_config(path: Optional[Path] = None) -> StackConfig:
    """
    Load a stack configuration from a TOML file.

    Args:
        path: TOML file; None returns the defaults

    Returns:
        Validated StackConfig

    Raises:
        ConfigError: If the file cannot be parsed or holds invalid values
    """
    config = StackConfig()
    if path is None:
        return config.validate()

    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"Failed to read config {path}: {e}") from e

    overrides = {}
    for section, values in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"Unknown config section [{section}]")
        cls = _SECTIONS[section]
        overrides[section] = replace(getattr(config, section), **_coerce_section(cls, values))

    return replace(config, **overrides).validate()
