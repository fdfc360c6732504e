"""Identifier space arithmetic: XOR metric, bucket indexing and key derivation.

Peer identifiers are plain ``int`` values in ``[0, 2**bits)``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

from .errors import AddressError, ConfigError, SelfContactError

PeerId = int

HOUR_MS = 3_600_000


@dataclass(frozen=True)
class KademliaParams:
    alpha: int = 3
    bits: int = 160
    k: int = 20
    offline_expiry_ms: int = 24 * HOUR_MS

    def __post_init__(self):
        if self.alpha < 1:
            raise ConfigError(f"alpha must be >= 1, got {self.alpha}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not 8 <= self.bits <= 256:
            raise ConfigError(f"bits must lie in [8, 256], got {self.bits}")
        if self.offline_expiry_ms < 0:
            raise ConfigError("offline_expiry_ms must be non-negative")

    @property
    def id_bytes(self) -> int:
        return (self.bits + 7) // 8

    @property
    def hex_digits(self) -> int:
        return math.ceil(self.bits / 4)

    def as_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "bits": self.bits,
            "k": self.k,
            "offline_expiry_ms": self.offline_expiry_ms,
        }


def normalize_address(address: str) -> str:
    if not isinstance(address, str) or address.count("@") != 1:
        raise AddressError(f"address must contain exactly one '@': {address!r}")
    local, domain = address.split("@")
    if not local:
        raise AddressError(f"empty local part in {address!r}")
    if not domain:
        raise AddressError(f"empty domain part in {address!r}")
    return address.lower()


def derive_peer_id(address: str, params: KademliaParams | None = None) -> PeerId:
    """Map ``user@host`` to the first ``bits`` bits of SHA-1 of the lowercased address.

    Widths above 160 bits extend the digest with SHA-1 over a counter suffix.
    """
    bits = (params or KademliaParams()).bits
    data = normalize_address(address).encode("utf-8")
    digest = hashlib.sha1(data).digest()
    counter = 1
    while len(digest) * 8 < bits:
        digest += hashlib.sha1(data + counter.to_bytes(4, "big")).digest()
        counter += 1
    return int.from_bytes(digest, "big") >> (len(digest) * 8 - bits)


def random_peer_id(rng, bits: int) -> PeerId:
    return rng.getrandbits(bits)


def check_peer_id(value: int, bits: int) -> PeerId:
    if not isinstance(value, int) or value < 0 or value >> bits:
        raise ConfigError(f"peer id {value!r} outside the {bits}-bit key space")
    return value


def xor_distance(a: PeerId, b: PeerId) -> int:
    return a ^ b


def bucket_index(local: PeerId, other: PeerId) -> int:
    """Return ``i`` such that ``2**i <= local ^ other < 2**(i+1)``."""
    d = local ^ other
    if d == 0:
        raise SelfContactError("a node has no bucket for its own id")
    return d.bit_length() - 1


def closer(target: PeerId, a: PeerId, b: PeerId) -> int:
    """Three-way comparison of ``a`` and ``b`` by distance to ``target`` (-1, 0, 1)."""
    da, db = a ^ target, b ^ target
    return (da > db) - (da < db)


def peer_id_hex(value: PeerId, bits: int) -> str:
    return format(value, "0{}x".format(math.ceil(bits / 4)))


def parse_peer_id(text: str, bits: int) -> PeerId:
    if len(text) != math.ceil(bits / 4):
        raise ConfigError(f"expected {math.ceil(bits / 4)} hex digits, got {text!r}")
    return check_peer_id(int(text, 16), bits)


def peer_id_bytes(value: PeerId, bits: int) -> bytes:
    return value.to_bytes((bits + 7) // 8, "big")
