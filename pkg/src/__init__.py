"""Secure disaggregated storage: sealed sectors, counter leasing and Merkle-tree freshness."""

__version__ = "1.0.0"

from .config import StackConfig, load_config
from .exceptions import (
    SecureStorageError,
    ConfigError,
    IntegrityError,
    FreshnessError,
    FreshnessViolationError,
    NetworkFreshnessError,
    CounterExhaustedError,
    KbsError,
    TransportError,
    BenchmarkError,
)
from .kbs import KbsClient, KeyBrokerService
from .local_engine import LocalEngine, ReadRequest, WriteRequest
from .remote_engine import RemoteEngine
from .stack import SecureStack
from .workload import WorkloadSpec

__all__ = [
    "StackConfig",
    "load_config",
    "SecureStorageError",
    "ConfigError",
    "IntegrityError",
    "FreshnessError",
    "FreshnessViolationError",
    "NetworkFreshnessError",
    "CounterExhaustedError",
    "KbsError",
    "TransportError",
    "BenchmarkError",
    "KbsClient",
    "KeyBrokerService",
    "LocalEngine",
    "ReadRequest",
    "WriteRequest",
    "RemoteEngine",
    "SecureStack",
    "WorkloadSpec",
]
