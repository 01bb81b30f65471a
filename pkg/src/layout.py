"""Device layout: data sets, metadata sectors and per-sector metadata encodings."""

import struct
from dataclasses import dataclass, field, replace
from typing import Tuple, Union

import numpy as np

from .config import (
    SECTOR_BYTES,
    METADATA_BYTES,
    LEGACY_METADATA_BYTES,
    DATA_SET_SIZE,
    COUNTER_BITS,
    NET_COUNTER_BITS,
)
from .exceptions import GeometryError, MetadataFormatError

IV_BYTES = 8
TAG_BYTES = 16
NET_MAC_BYTES = 8
LEGACY_IV_BITS = 40
LEGACY_KEY_ID_BITS = 24
LEGACY_TAG_BYTES = 8

# iv_counter | key_id | aead_tag | freshness_tag | net_mac | net_counter | reserved
_META64 = struct.Struct("<QI16s16s8s6s6s")
FRESHNESS_TAG_OFFSET = 28
NET_MAC_OFFSET = 44
RESERVED_OFFSET = 58
_META16 = struct.Struct("<Q8s")
_SECTOR_HEADER = struct.Struct("<Q")

IV_DTYPE = np.dtype("<u8")


def compute_data_sets(total_sectors: int, data_set_size: int = DATA_SET_SIZE) -> int:
    """
    Compute the minimal number of data sets D for a device.

    D is the smallest count such that the B - D remaining data sectors fit in
    D data sets of S sectors, i.e. ceil(B / (S + 1)).

    Args:
        total_sectors: Physical sectors on the device (B)
        data_set_size: Data sectors per metadata sector (S)

    Returns:
        Number of data sets (and metadata sectors) D

    Raises:
        GeometryError: If the device cannot hold a single data set
    """
    if data_set_size < 1:
        raise GeometryError(f"Data set size must be positive, got {data_set_size}")
    if total_sectors <= data_set_size:
        raise GeometryError(
            f"Geometry too small: {total_sectors} sectors for data sets of {data_set_size}"
        )
    return -(-total_sectors // (data_set_size + 1))


@dataclass(frozen=True)
class DeviceGeometry:
    """Addressing parameters of one extended-LBA device."""

    total_sectors: int
    sector_bytes: int = SECTOR_BYTES
    metadata_bytes: int = METADATA_BYTES
    data_set_size: int = DATA_SET_SIZE
    data_set_count: int = field(init=False)
    data_sector_count: int = field(init=False)

    def __post_init__(self):
        if self.sector_bytes != SECTOR_BYTES:
            raise GeometryError(f"Unsupported sector size {self.sector_bytes}, only {SECTOR_BYTES}B")
        if self.metadata_bytes not in (METADATA_BYTES, LEGACY_METADATA_BYTES):
            raise GeometryError(f"Unsupported metadata size {self.metadata_bytes}")
        if _SECTOR_HEADER.size + self.data_set_size * IV_BYTES > self.sector_bytes:
            raise GeometryError(f"Data set size {self.data_set_size} does not fit one metadata sector")
        count = compute_data_sets(self.total_sectors, self.data_set_size)
        object.__setattr__(self, "data_set_count", count)
        object.__setattr__(self, "data_sector_count", self.total_sectors - count)

    @property
    def record_bytes(self) -> int:
        """Bytes per extended LBA (sector plus inline metadata)."""
        return self.sector_bytes + self.metadata_bytes

    @property
    def is_legacy(self) -> bool:
        return self.metadata_bytes == LEGACY_METADATA_BYTES

    @property
    def storage_overhead(self) -> float:
        """Fraction of physical sectors used for aggregated metadata."""
        return self.data_set_count / self.total_sectors

    def data_set_of(self, index: int) -> int:
        return metadata_location(index, self)[0]

    def data_set_length(self, data_set: int) -> int:
        """Number of data sectors covered by a data set; the last one may be partial."""
        if not 0 <= data_set < self.data_set_count:
            raise GeometryError(f"Data set {data_set} out of range [0, {self.data_set_count})")
        start = data_set * self.data_set_size
        return min(self.data_set_size, self.data_sector_count - start)

    def data_set_range(self, data_set: int) -> range:
        """Data-sector indices belonging to a data set."""
        start = data_set * self.data_set_size
        return range(start, start + self.data_set_length(data_set))


def _check_index(index: int, geom: DeviceGeometry) -> None:
    if not 0 <= index < geom.data_sector_count:
        raise GeometryError(f"Data sector {index} out of range [0, {geom.data_sector_count})")


def data_to_physical(index: int, geom: DeviceGeometry) -> int:
    """
    Map a data-sector index to its physical sector.

    Args:
        index: Data-sector index i
        geom: Device geometry

    Returns:
        Physical sector D + i

    Raises:
        GeometryError: If the index is outside the data region
    """
    _check_index(index, geom)
    return geom.data_set_count + index


def metadata_location(index: int, geom: DeviceGeometry) -> Tuple[int, int]:
    """
    Locate the aggregated IV slot of a data sector.

    Args:
        index: Data-sector index i
        geom: Device geometry

    Returns:
        (metadata sector floor(i/S), offset i mod S)

    Raises:
        GeometryError: If the index is outside the data region
    """
    _check_index(index, geom)
    return divmod(index, geom.data_set_size)


@dataclass(frozen=True)
class SectorMetadata64:
    """The 64-byte extended-LBA metadata of one sector."""

    iv_counter: int = 0
    key_id: int = 0
    aead_tag: bytes = bytes(TAG_BYTES)
    freshness_tag: bytes = bytes(TAG_BYTES)
    net_mac: bytes = bytes(NET_MAC_BYTES)
    net_counter: int = 0

    def __post_init__(self):
        if not 0 <= self.iv_counter < 2**COUNTER_BITS:
            raise MetadataFormatError(f"iv_counter {self.iv_counter} exceeds {COUNTER_BITS} bits")
        if not 0 <= self.key_id < 2**32:
            raise MetadataFormatError(f"key_id {self.key_id} exceeds 32 bits")
        if not 0 <= self.net_counter < 2**NET_COUNTER_BITS:
            raise MetadataFormatError(f"net_counter {self.net_counter} exceeds {NET_COUNTER_BITS} bits")
        if len(self.aead_tag) != TAG_BYTES or len(self.freshness_tag) != TAG_BYTES:
            raise MetadataFormatError("Tags must be 16 bytes")
        if len(self.net_mac) != NET_MAC_BYTES:
            raise MetadataFormatError("net_mac must be 8 bytes")

    @property
    def is_unwritten(self) -> bool:
        """True when the persisted fields are all zero (sector never written)."""
        return (
            self.iv_counter == 0
            and self.key_id == 0
            and not any(self.aead_tag)
            and not any(self.freshness_tag)
        )

    def persisted(self) -> "SectorMetadata64":
        """Copy with the wire-only transport fields zeroed."""
        return replace(self, net_mac=bytes(NET_MAC_BYTES), net_counter=0)


@dataclass(frozen=True)
class SectorMetadata16:
    """The legacy 16-byte metadata: 40-bit IV, 24-bit key id, truncated tag."""

    iv_counter: int = 0
    key_id: int = 0
    aead_tag_trunc: bytes = bytes(LEGACY_TAG_BYTES)

    def __post_init__(self):
        if not 0 <= self.iv_counter < 2**LEGACY_IV_BITS:
            raise MetadataFormatError(f"iv_counter {self.iv_counter} exceeds {LEGACY_IV_BITS} bits")
        if not 0 <= self.key_id < 2**LEGACY_KEY_ID_BITS:
            raise MetadataFormatError(f"key_id {self.key_id} exceeds {LEGACY_KEY_ID_BITS} bits")
        if len(self.aead_tag_trunc) != LEGACY_TAG_BYTES:
            raise MetadataFormatError("Truncated tag must be 8 bytes")

    @property
    def is_unwritten(self) -> bool:
        return self.iv_counter == 0 and self.key_id == 0 and not any(self.aead_tag_trunc)


SectorMetadata = Union[SectorMetadata64, SectorMetadata16]


def encode_metadata(meta: SectorMetadata) -> bytes:
    """
    Serialize per-sector metadata to its little-endian on-disk form.

    Args:
        meta: 64-byte or legacy 16-byte metadata

    Returns:
        64 or 16 bytes
    """
    if isinstance(meta, SectorMetadata16):
        packed = meta.iv_counter | (meta.key_id << LEGACY_IV_BITS)
        return _META16.pack(packed, meta.aead_tag_trunc)
    return _META64.pack(
        meta.iv_counter,
        meta.key_id,
        meta.aead_tag,
        meta.freshness_tag,
        meta.net_mac,
        meta.net_counter.to_bytes(6, "little"),
        bytes(6),
    )


def decode_metadata(data: bytes) -> SectorMetadata:
    """
    Parse per-sector metadata; the format is chosen by length.

    Args:
        data: 64 or 16 bytes

    Returns:
        SectorMetadata64 or SectorMetadata16

    Raises:
        MetadataFormatError: On a wrong length, nonzero reserved bytes or out-of-range fields
    """
    data = bytes(data)
    if len(data) == LEGACY_METADATA_BYTES:
        packed, tag = _META16.unpack(data)
        return SectorMetadata16(
            iv_counter=packed & (2**LEGACY_IV_BITS - 1),
            key_id=packed >> LEGACY_IV_BITS,
            aead_tag_trunc=tag,
        )
    if len(data) != METADATA_BYTES:
        raise MetadataFormatError(f"Metadata must be 16 or 64 bytes, got {len(data)}")

    iv, key_id, aead_tag, fresh_tag, net_mac, net_counter, reserved = _META64.unpack(data)
    if any(reserved):
        raise MetadataFormatError("Reserved metadata bytes are not zero")
    return SectorMetadata64(
        iv_counter=iv,
        key_id=key_id,
        aead_tag=aead_tag,
        freshness_tag=fresh_tag,
        net_mac=net_mac,
        net_counter=int.from_bytes(net_counter, "little"),
    )


def stamp_network_fields(raw: bytes, net_mac: bytes, net_counter: int) -> bytes:
    """Fill the wire-only fields of encoded 64-byte metadata, leaving the persisted fields as they are."""
    return raw[:NET_MAC_OFFSET] + net_mac + net_counter.to_bytes(6, "little") + raw[RESERVED_OFFSET:]


def to_legacy(meta: SectorMetadata64) -> SectorMetadata16:
    """Narrow wire metadata to the legacy on-disk layout."""
    return SectorMetadata16(
        iv_counter=meta.iv_counter,
        key_id=meta.key_id,
        aead_tag_trunc=meta.aead_tag[:LEGACY_TAG_BYTES],
    )


def from_legacy(meta: SectorMetadata16) -> SectorMetadata64:
    """Widen legacy metadata for the wire; the tag tail is zero-filled."""
    return SectorMetadata64(
        iv_counter=meta.iv_counter,
        key_id=meta.key_id,
        aead_tag=meta.aead_tag_trunc + bytes(TAG_BYTES - LEGACY_TAG_BYTES),
    )


@dataclass
class MetadataSector:
    """Aggregated IVs of one data set, as stored in its metadata sector."""

    data_set: int
    iv_array: np.ndarray

    @classmethod
    def empty(cls, data_set: int, geom: DeviceGeometry) -> "MetadataSector":
        return cls(data_set, np.zeros(geom.data_set_size, dtype=IV_DTYPE))


def encode_metadata_sector(sector: MetadataSector, geom: DeviceGeometry) -> bytes:
    """
    Serialize aggregated IVs into one sector.

    Layout: bytes 0-7 data-set index, then S little-endian 8-byte IVs, zero padding.

    Args:
        sector: Aggregated IV sector
        geom: Device geometry

    Returns:
        sector_bytes bytes
    """
    if len(sector.iv_array) != geom.data_set_size:
        raise MetadataFormatError(
            f"IV array has {len(sector.iv_array)} entries, expected {geom.data_set_size}"
        )
    body = _SECTOR_HEADER.pack(sector.data_set) + sector.iv_array.astype(IV_DTYPE).tobytes()
    return body.ljust(geom.sector_bytes, b"\0")


def decode_metadata_sector(data: bytes, data_set: int, geom: DeviceGeometry) -> MetadataSector:
    """
    Parse an aggregated IV sector.

    An all-zero sector is the never-written state of any data set.

    Args:
        data: sector_bytes bytes read from physical sector data_set
        data_set: Expected data-set index
        geom: Device geometry

    Returns:
        MetadataSector

    Raises:
        MetadataFormatError: On a wrong length, index mismatch or nonzero padding
    """
    if len(data) != geom.sector_bytes:
        raise MetadataFormatError(f"Metadata sector must be {geom.sector_bytes} bytes, got {len(data)}")
    (stored_index,) = _SECTOR_HEADER.unpack_from(data)
    end = _SECTOR_HEADER.size + geom.data_set_size * IV_BYTES
    ivs = np.frombuffer(bytes(data[_SECTOR_HEADER.size:end]), dtype=IV_DTYPE).copy()

    if any(data[end:]):
        raise MetadataFormatError(f"Metadata sector {data_set} has nonzero padding")
    if stored_index != data_set and (stored_index != 0 or ivs.any()):
        raise MetadataFormatError(
            f"Metadata sector {data_set} carries index {stored_index}"
        )
    unused = geom.data_set_length(data_set)
    if ivs[unused:].any():
        raise MetadataFormatError(f"Metadata sector {data_set} has IVs beyond its data set")
    return MetadataSector(data_set, ivs)
