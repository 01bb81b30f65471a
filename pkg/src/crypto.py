"""Key derivation, sector sealing, freshness MACs and tree hashing."""

import hashlib
import hmac
import math
import secrets
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import blake3
import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM, ChaCha20Poly1305

from .config import (
    AEAD_ALGORITHM,
    HASH_ALGORITHM,
    COUNTER_BITS,
    SECTOR_BITS,
    NET_COUNTER_BITS,
    NODE_BYTES,
    SECTOR_BYTES,
)
from .exceptions import CryptoError, IntegrityError, NonceRangeError
from .layout import IV_DTYPE, LEGACY_TAG_BYTES, NET_MAC_BYTES, TAG_BYTES

KEY_BYTES = 32
NONCE_BYTES = 12

# Largest value reported by safe_write_capacity
CAPACITY_SATURATION_BYTES = 2**320

_HASHES: Dict[str, Callable] = {
    "blake3": blake3.blake3,
    "sha256": hashlib.sha256,
    "blake2b": hashlib.blake2b,
}

_AEADS = {
    "aes-256-gcm": AESGCM,
    "chacha20-poly1305": ChaCha20Poly1305,
}


@lru_cache(maxsize=4096)
def _aead(name: str, key: bytes):
    return _AEADS[name](key)


@lru_cache(maxsize=4096)
def _keyed_mac(name: str, key: bytes) -> "hmac.HMAC":
    return hmac.new(key, digestmod=_HASHES[name])


@dataclass(frozen=True)
class CipherSuite:
    """Pluggable algorithm ids for the AEAD and the tree/MAC hash."""

    aead: str = AEAD_ALGORITHM
    hash: str = HASH_ALGORITHM

    def __post_init__(self):
        if self.aead not in _AEADS:
            raise CryptoError(f"Unsupported AEAD algorithm: {self.aead}")
        if self.hash not in _HASHES:
            raise CryptoError(f"Unsupported hash algorithm: {self.hash}")

    def digest(self, data: bytes, length: int = NODE_BYTES) -> bytes:
        """Hash truncated to `length` bytes."""
        return _HASHES[self.hash](data).digest()[:length]

    def mac(self, key: bytes, data: bytes, length: Optional[int] = None) -> bytes:
        """HMAC over the configured hash, optionally truncated."""
        m = _keyed_mac(self.hash, bytes(key)).copy()
        m.update(data)
        out = m.digest()
        return out if length is None else out[:length]

    def cipher(self, key: bytes):
        return _aead(self.aead, bytes(key))


DEFAULT_SUITE = CipherSuite()


def compose_nonce(sector: int, counter: int) -> bytes:
    """
    Build the 96-bit AEAD nonce: sector in the top 38 bits, counter in the bottom 58.

    Raises:
        NonceRangeError: If either field does not fit
    """
    if not 0 <= sector < 2**SECTOR_BITS:
        raise NonceRangeError(f"Sector {sector} exceeds {SECTOR_BITS} bits")
    if not 0 <= counter < 2**COUNTER_BITS:
        raise NonceRangeError(f"Counter {counter} exceeds {COUNTER_BITS} bits")
    return ((sector << COUNTER_BITS) | counter).to_bytes(NONCE_BYTES, "big")


def derive_device_key(
    tenant_key: bytes,
    device_id: bytes,
    suite: CipherSuite = DEFAULT_SUITE
) -> bytes:
    """
    Derive the tenant-device key k_d = HMAC(k_s, device_id).

    Args:
        tenant_key: Tenant storage key k_s (32 bytes)
        device_id: Device identifier, e.g. an EUI64
        suite: Cipher suite supplying the hash

    Returns:
        32-byte device key

    Raises:
        CryptoError: On a wrong key length or empty device id
    """
    if len(tenant_key) != KEY_BYTES:
        raise CryptoError(f"Tenant key must be {KEY_BYTES} bytes")
    if not device_id:
        raise CryptoError("Device id must not be empty")
    return suite.mac(tenant_key, bytes(device_id), KEY_BYTES)


def derive_data_key(
    device_key: bytes,
    key_id: int,
    suite: CipherSuite = DEFAULT_SUITE
) -> bytes:
    """Derive the sealing key k = HMAC(k_d, key_id) for one key id."""
    if len(device_key) != KEY_BYTES:
        raise CryptoError(f"Device key must be {KEY_BYTES} bytes")
    if not 0 <= key_id < 2**32:
        raise CryptoError(f"key_id {key_id} exceeds 32 bits")
    return suite.mac(device_key, key_id.to_bytes(4, "little"), KEY_BYTES)


def random_key() -> bytes:
    return secrets.token_bytes(KEY_BYTES)


@dataclass
class KeyHierarchy:
    """
    Keys held by one participant.

    The broker holds tenant_storage_key; local instances hold device_key and the
    network key of their session; remote instances hold the freshness key.
    """

    device_key: Optional[bytes] = None
    tenant_storage_key: Optional[bytes] = None
    network_key: Optional[bytes] = None
    freshness_key: Optional[bytes] = None
    suite: CipherSuite = DEFAULT_SUITE
    _data_keys: Dict[int, bytes] = field(default_factory=dict, repr=False)

    def data_key(self, key_id: int) -> bytes:
        """Sealing key for a key id, derived on first use."""
        if self.device_key is None:
            raise CryptoError("No device key provisioned")
        key = self._data_keys.get(key_id)
        if key is None:
            key = derive_data_key(self.device_key, key_id, self.suite)
            self._data_keys[key_id] = key
        return key


def seal_sector(
    key: bytes,
    sector: int,
    counter: int,
    plaintext: bytes,
    suite: CipherSuite = DEFAULT_SUITE
) -> Tuple[bytes, bytes]:
    """
    Encrypt and authenticate one sector.

    The sector number is bound through the nonce rather than associated data.

    Args:
        key: Data key k
        sector: Data-sector index (< 2^38)
        counter: Fresh IV counter (< 2^58), never reused under this key
        plaintext: Exactly one sector of data
        suite: Cipher suite

    Returns:
        (ciphertext, 16-byte tag)

    Raises:
        NonceRangeError: If sector or counter is out of range
    """
    if len(plaintext) != SECTOR_BYTES:
        raise CryptoError(f"Plaintext must be {SECTOR_BYTES} bytes, got {len(plaintext)}")
    nonce = compose_nonce(sector, counter)
    sealed = suite.cipher(key).encrypt(nonce, bytes(plaintext), None)
    return sealed[:-TAG_BYTES], sealed[-TAG_BYTES:]


def open_sector(
    key: bytes,
    sector: int,
    counter: int,
    ciphertext: bytes,
    tag: bytes,
    suite: CipherSuite = DEFAULT_SUITE
) -> bytes:
    """
    Verify and decrypt one sector.

    Returns:
        Plaintext

    Raises:
        IntegrityError: If authentication fails; carries the sector index
    """
    nonce = compose_nonce(sector, counter)
    try:
        return suite.cipher(key).decrypt(nonce, bytes(ciphertext) + bytes(tag), None)
    except InvalidTag as e:
        raise IntegrityError(sector) from e


def _keystream_cipher(key: bytes, nonce: bytes, suite: CipherSuite) -> Cipher:
    # payload keystream of each AEAD: GCM starts at block counter 2, ChaCha20-Poly1305 at 1
    if suite.aead == "aes-256-gcm":
        return Cipher(algorithms.AES(key), modes.CTR(nonce + (2).to_bytes(4, "big")))
    return Cipher(algorithms.ChaCha20(key, (1).to_bytes(4, "little") + nonce), mode=None)


def open_sector_truncated(
    key: bytes,
    sector: int,
    counter: int,
    ciphertext: bytes,
    tag_prefix: bytes,
    suite: CipherSuite = DEFAULT_SUITE
) -> bytes:
    """
    Verify a sector whose stored tag was truncated (legacy 16-byte metadata).

    The ciphertext is decrypted with the AEAD's keystream and resealed; the
    recomputed tag must start with the stored prefix.

    Raises:
        IntegrityError: If the recomputed tag prefix differs
    """
    if len(tag_prefix) != LEGACY_TAG_BYTES:
        raise CryptoError(f"Truncated tag must be {LEGACY_TAG_BYTES} bytes")
    nonce = compose_nonce(sector, counter)
    decryptor = _keystream_cipher(bytes(key), nonce, suite).decryptor()
    plaintext = decryptor.update(bytes(ciphertext)) + decryptor.finalize()
    resealed = suite.cipher(key).encrypt(nonce, plaintext, None)
    if not hmac.compare_digest(resealed[-TAG_BYTES:][:LEGACY_TAG_BYTES], bytes(tag_prefix)):
        raise IntegrityError(sector)
    return plaintext


def network_mac(
    network_key: bytes,
    iv_counter: int,
    net_counter: int,
    suite: CipherSuite = DEFAULT_SUITE
) -> bytes:
    """
    Network freshness MAC H_n = HMAC_k(IV || j), truncated to 8 bytes.

    Raises:
        NonceRangeError: If j exceeds 48 bits
    """
    if not 0 <= net_counter < 2**NET_COUNTER_BITS:
        raise NonceRangeError(f"Network counter {net_counter} exceeds {NET_COUNTER_BITS} bits")
    message = iv_counter.to_bytes(8, "little") + net_counter.to_bytes(6, "little")
    return suite.mac(network_key, message, NET_MAC_BYTES)


def freshness_tag(
    freshness_key: bytes,
    sector: int,
    iv_counter: int,
    parent_hash: bytes,
    suite: CipherSuite = DEFAULT_SUITE
) -> bytes:
    """Fast-path tag binding a sector's IV to the level-1 node of its data set."""
    message = sector.to_bytes(8, "little") + iv_counter.to_bytes(8, "little") + bytes(parent_hash)
    return suite.mac(freshness_key, message, TAG_BYTES)


def node_hash(
    iv_array: Union[np.ndarray, Sequence[int]],
    data_set_size: int,
    suite: CipherSuite = DEFAULT_SUITE
) -> bytes:
    """
    Hash a data set's IVs into its 16-byte level-1 node.

    Entries are fixed-width little-endian and zero-padded to the full data-set
    size so a partial set hashes the same as its padded form.
    """
    ivs = np.asarray(iv_array, dtype=IV_DTYPE)
    if len(ivs) > data_set_size:
        raise CryptoError(f"IV array of {len(ivs)} exceeds data set size {data_set_size}")
    if len(ivs) < data_set_size:
        ivs = np.concatenate([ivs, np.zeros(data_set_size - len(ivs), dtype=IV_DTYPE)])
    return suite.digest(ivs.tobytes())


def inner_hash(children: Sequence[bytes], suite: CipherSuite = DEFAULT_SUITE) -> bytes:
    """Hash of an upper tree node over its concatenated children."""
    return suite.digest(b"".join(children))


def safe_write_capacity(
    block_bytes: int,
    iv_bits: int,
    mode: str = "sequential",
    probability: float = 2.0**-32
) -> int:
    """
    Bytes that can be written under one key before nonce collisions become likely.

    Sequential IVs never collide, so the capacity is 2^d blocks. Random IVs
    follow the birthday bound n = sqrt(-2 * 2^d * ln(1 - p)), floored to whole
    blocks.

    Args:
        block_bytes: Bytes encrypted per nonce
        iv_bits: IV width d
        mode: "sequential" or "random"
        probability: Accepted collision probability p for random IVs

    Returns:
        Whole bytes, saturated at CAPACITY_SATURATION_BYTES

    Raises:
        CryptoError: On invalid arguments
    """
    if not 0 < iv_bits <= 256:
        raise CryptoError(f"IV width must be in (0, 256], got {iv_bits}")
    if block_bytes <= 0:
        raise CryptoError("Block size must be positive")

    if mode == "sequential":
        capacity = 2**iv_bits * block_bytes
    elif mode == "random":
        if not 0.0 < probability < 1.0:
            raise CryptoError(f"Collision probability must be in (0, 1), got {probability}")
        blocks = math.isqrt(int(-2.0 * math.log1p(-probability) * 2**iv_bits))
        capacity = blocks * block_bytes
    else:
        raise CryptoError(f"Unknown capacity mode: {mode}")

    return min(capacity, CAPACITY_SATURATION_BYTES)
