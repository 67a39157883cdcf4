"""
Labeled random streams.

All randomness in the lab flows through RngStream so that a run is
reproducible from a single master seed. A stream is identified by
(master_seed, stream_label); child streams extend the label with "/".
"""

import hashlib
from typing import Optional

import numpy as np

from ..models.core import KEY_BYTES, SecretKey


def _label_words(label: str) -> tuple[int, ...]:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=16).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "big") for i in range(0, 16, 4))


class RngStream:
    """Deterministic numpy Generator bound to (master_seed, stream_label)."""

    def __init__(self, master_seed: int, stream_label: str = "root"):
        if not 0 <= master_seed < (1 << 64):
            raise ValueError(f"master_seed must be a 64-bit unsigned integer, got {master_seed}")
        self.master_seed = master_seed
        self.stream_label = stream_label
        self._generator: Optional[np.random.Generator] = None

    @property
    def generator(self) -> np.random.Generator:
        if self._generator is None:
            seq = np.random.SeedSequence(
                entropy=self.master_seed, spawn_key=_label_words(self.stream_label)
            )
            self._generator = np.random.default_rng(seq)
        return self._generator

    def child(self, label: str) -> "RngStream":
        """Independent stream for a sub-task, e.g. child("trial/3")."""
        return RngStream(self.master_seed, f"{self.stream_label}/{label}")

    def uniform(self) -> float:
        return float(self.generator.random())

    def integer(self, high: int) -> int:
        """Uniform integer in [0, high)."""
        return int(self.generator.integers(0, high))

    def secret_key(self) -> SecretKey:
        return SecretKey(key_bytes=self.generator.bytes(KEY_BYTES))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.master_seed}, label={self.stream_label!r})"
