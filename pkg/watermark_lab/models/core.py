"""
Pydantic models for the shared domain types.

These are the values every oracle, scheme and detector consumes. All of them are
frozen, so they can be shared freely between concurrent trials.
"""

from enum import Enum
from functools import total_ordering
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

KEY_BYTES = 32


class Verdict(str, Enum):
    """Outcome of a quality comparison under a tie band."""

    win = "win"
    tie = "tie"
    lose = "lose"


class Vocabulary(BaseModel):
    """Fixed token alphabet; tokens are the dense indices 0..size-1."""

    model_config = ConfigDict(frozen=True)

    size: int = Field(..., ge=2, description="Number of distinct tokens")

    def check(self, tokens: tuple[int, ...], what: str = "sequence") -> None:
        """
        Verify every token index is inside the vocabulary.

        Args:
            tokens: Token indices to check
            what: Label used in the error message

        Raises:
            ValueError: If any index is out of range
        """
        for token in tokens:
            if token >= self.size:
                raise ValueError(f"{what} token {token} outside vocabulary of size {self.size}")


def serialize_tokens(tokens: tuple[int, ...]) -> bytes:
    """Each token as a 4-byte big-endian unsigned integer, concatenated."""
    return b"".join(int(t).to_bytes(4, "big") for t in tokens)


class TokenSequence(BaseModel):
    """An output y: an ordered string of token indices."""

    model_config = ConfigDict(frozen=True)

    tokens: tuple[int, ...] = Field(default_factory=tuple, description="Token indices")

    @field_validator("tokens")
    @classmethod
    def _non_negative(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if any(t < 0 for t in value):
            raise ValueError("token indices must be non-negative")
        return value

    @property
    def length(self) -> int:
        return len(self.tokens)

    def to_bytes(self) -> bytes:
        return serialize_tokens(self.tokens)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.tokens, dtype=np.int64)

    def hamming(self, other: "TokenSequence") -> int:
        """Number of positions where two equal-length sequences differ."""
        if other.length != self.length:
            raise ValueError(f"length mismatch: {self.length} vs {other.length}")
        return sum(a != b for a, b in zip(self.tokens, other.tokens))

    def __len__(self) -> int:
        return len(self.tokens)


class Prompt(BaseModel):
    """A prompt x: token context plus a stable label for experiment records."""

    model_config = ConfigDict(frozen=True)

    tokens: tuple[int, ...] = Field(default_factory=tuple, description="Prompt token indices")
    identifier: str = Field("prompt", description="Stable label used in records")

    @field_validator("tokens")
    @classmethod
    def _non_negative(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if any(t < 0 for t in value):
            raise ValueError("token indices must be non-negative")
        return value


class SecretKey(BaseModel):
    """Opaque fixed-width key material drawn uniformly by Watermark."""

    model_config = ConfigDict(frozen=True)

    key_bytes: bytes = Field(..., min_length=KEY_BYTES, max_length=KEY_BYTES)

    def __repr__(self) -> str:
        return f"SecretKey({self.key_bytes[:4].hex()}...)"

    __str__ = __repr__


@total_ordering
class QualityScore(BaseModel):
    """A quality value Q(x, y) in [0, 1]."""

    model_config = ConfigDict(frozen=True)

    value: float = Field(..., ge=0.0, le=1.0)

    def __lt__(self, other: "QualityScore") -> bool:
        return self.value < other.value

    def __float__(self) -> float:
        return self.value


class DetectionResult(BaseModel):
    """Output of Detect_k: statistic, optional p-value and the decision bit."""

    model_config = ConfigDict(frozen=True)

    statistic: float = Field(..., description="z-score, alignment cost or hash ratio")
    p_value: Optional[float] = Field(None, ge=0.0, le=1.0, description="Absent for threshold-only detectors")
    decision: int = Field(..., ge=0, le=1, description="1 = watermarked")
    threshold: Optional[float] = Field(None, description="Threshold the decision was taken against")
    scheme: str = Field("", description="Scheme name")
