"""Assembles a KBS, a simulated device and both engines into one in-process stack."""

import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, Optional

from .blockdev import SimDevice
from .config import SECTOR_BYTES, StackConfig
from .crypto import CipherSuite
from .exceptions import ConfigError, GeometryError
from .kbs import KbsClient, KbsFrameHandler, KeyBrokerService
from .layout import DeviceGeometry, data_to_physical
from .local_engine import LocalEngine, ReadRequest, WriteRequest
from .logger import setup_logger
from .nvstore import NvStore
from .remote_engine import RemoteEngine, RemoteFrameHandler
from .transport import InProcessChannel
from .workload import MODES

logger = setup_logger(__name__)

TENANT_ID = "tenant-0"
LESSEE_ID = "local-0"
DEVICE_ID = bytes.fromhex("5e1ec7ed00000001")


class SecureStack:
    """
    One tenant, one device, one local and one remote instance in a single process.

    Modes:
        baremetal: plaintext straight to the device, no engines
        integrity: local engine seals and verifies, remote engine only stores
        freshness: both engines, with the Hazel Merkle tree on the remote side
    """

    def __init__(
        self,
        config: StackConfig = StackConfig(),
        mode: str = "freshness",
        workdir: Optional[Path] = None,
        ec: Optional[bool] = None
    ):
        if mode not in MODES:
            raise ConfigError(f"Unknown mode '{mode}', expected one of {MODES}")
        if ec is not None:
            config = replace(config, remote=replace(config.remote, eventual_consistency=ec))
        self.config = config.validate()
        self.mode = mode
        self.workdir = Path(workdir) if workdir else Path(tempfile.mkdtemp(prefix="snvme-"))
        self.suite = CipherSuite(config.suite.aead, config.suite.hash)
        self.geometry = DeviceGeometry(
            config.device.total_sectors,
            config.device.sector_bytes,
            config.device.metadata_bytes,
            config.device.data_set_size,
        )
        self.device: Optional[SimDevice] = None
        self.kbs: Optional[KeyBrokerService] = None
        self.remote: Optional[RemoteEngine] = None
        self.local: Optional[LocalEngine] = None
        self.remote_handler: Optional[RemoteFrameHandler] = None

    @property
    def data_sectors(self) -> int:
        return self.geometry.data_sector_count

    def build(self) -> "SecureStack":
        """Create the device and wire up the components the mode needs."""
        cfg = self.config
        self.device = SimDevice.create(
            self.workdir / "device.img", self.geometry, delay_us=cfg.device.device_delay_us
        )
        if self.mode == "baremetal":
            logger.info(f"Built baremetal stack in {self.workdir}")
            return self

        self.kbs = KeyBrokerService(cfg.kbs, self.suite)
        self.kbs.register_tenant(TENANT_ID)
        self.kbs.register_device(DEVICE_ID)

        self.remote = RemoteEngine.format(
            self.device,
            nv_path=self.workdir / "nv.bin",
            config=cfg.remote,
            suite=self.suite,
            freshness=self.mode == "freshness",
        )
        self.remote_handler = RemoteFrameHandler(self.remote, cfg.attestation, cfg.remote.window_size)
        remote_channel = InProcessChannel(self.remote_handler)
        kbs_client = KbsClient(
            InProcessChannel(KbsFrameHandler(self.kbs, cfg.attestation, cfg.local.window_size)),
            cfg.attestation,
            self.suite,
            cfg.local.window_size,
        )
        self.local = LocalEngine(TENANT_ID, LESSEE_ID, kbs_client, cfg.local, cfg.attestation, self.suite)
        self.local.attach_device(DEVICE_ID, self.geometry, remote_channel)
        logger.info(
            f"Built {self.mode} stack in {self.workdir} "
            f"(ec={'on' if cfg.remote.eventual_consistency else 'off'})"
        )
        return self

    def _check(self, lba: int, count: int) -> None:
        if lba < 0 or count <= 0 or lba + count > self.data_sectors:
            raise GeometryError(f"Sectors [{lba}, {lba + count}) outside the {self.data_sectors} data sectors")

    def write(self, lba: int, data: bytes) -> int:
        if self.mode != "baremetal":
            return self.local.write(WriteRequest(DEVICE_ID, lba, data))
        count = len(data) // SECTOR_BYTES
        self._check(lba, count)
        empty = bytes(self.geometry.metadata_bytes)
        records = [(data[k * SECTOR_BYTES:(k + 1) * SECTOR_BYTES], empty) for k in range(count)]
        self.device.write_sectors(data_to_physical(lba, self.geometry), records)
        return count

    def read(self, lba: int, count: int) -> bytes:
        if self.mode != "baremetal":
            return self.local.read(ReadRequest(DEVICE_ID, lba, count)).data
        self._check(lba, count)
        records = self.device.read_sectors(data_to_physical(lba, self.geometry), count)
        return b"".join(data for data, _ in records)

    def drain(self) -> int:
        if self.local is None:
            self.device.flush()
            return 0
        return self.local.flush(DEVICE_ID)

    def refresh(self, first_data_set: int = 0, last_data_set: Optional[int] = None) -> int:
        if self.local is None:
            return 0
        if last_data_set is None:
            last_data_set = self.geometry.data_set_count - 1
        return self.local.refresh(DEVICE_ID, first_data_set, last_data_set)

    def restart_remote(self, image: Optional[bytes] = None) -> bytes:
        """
        Restart the remote instance from committed NV content and run recovery.

        Sessions survive the restart; only the engine behind them is replaced.

        Args:
            image: NV image captured at the crash point (default: the last commit)

        Returns:
            The recovered tree root

        Raises:
            FreshnessViolationError: If the device and NV state disagree
        """
        if self.remote is None:
            raise ConfigError("A baremetal stack has no remote instance")
        old = self.remote
        old.close()
        if image is None:
            image = old.nv.committed_image()
        self.device.reopen()
        nv = NvStore.from_image(image, path=self.workdir / "nv.bin")
        self.remote = RemoteEngine.open(
            self.device, nv, self.config.remote, self.suite, freshness=old.freshness
        )
        self.remote_handler.engine = self.remote
        logger.info(f"Restarted remote instance of {self.mode} stack")
        return self.remote.tree.root

    def metrics(self) -> Dict[str, Any]:
        return self.remote.metrics() if self.remote is not None else {}

    def close(self) -> None:
        if self.local is not None:
            self.local.shutdown()
            self.local = None
        if self.remote is not None:
            self.remote.close()
            self.remote = None
        if self.device is not None:
            self.device.close()
            self.device = None
        logger.info(f"Closed {self.mode} stack")

    def __enter__(self) -> "SecureStack":
        return self.build()

    def __exit__(self, *exc) -> None:
        self.close()
