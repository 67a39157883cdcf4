"""
Keyed pseudorandom function used by every keyed construction.

derive_subkey(key, context) is the first 8 bytes of
BLAKE2b(context, key=key.key_bytes, digest_size=8), read big-endian as an
unsigned 64-bit integer.
"""

import hashlib

from ..models.core import SecretKey

TWO_POW_64 = 1 << 64


def derive_subkey(key: SecretKey, context: bytes) -> int:
    """
    Derive a 64-bit value from a key and a context string.

    Args:
        key: Secret key (32 bytes)
        context: Arbitrary byte string

    Returns:
        Integer in [0, 2**64)
    """
    digest = hashlib.blake2b(context, key=key.key_bytes, digest_size=8).digest()
    return int.from_bytes(digest, "big")


def subkey_unit(key: SecretKey, context: bytes) -> float:
    """Map derive_subkey onto (0, 1): ((h >> 11) + 0.5) / 2**53."""
    return ((derive_subkey(key, context) >> 11) + 0.5) / float(1 << 53)
