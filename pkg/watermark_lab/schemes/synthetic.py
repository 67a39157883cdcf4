"""
Synthetic hash-threshold scheme with an exact false-positive rate.

The marked set is {y : derive_subkey(key, b"synthetic" + serialize(y)) <
target_fp_rate * 2**64}. For a key drawn independently of y the detector fires
with probability exactly target_fp_rate (up to PRF quality), and the
watermarked sampler rejection-samples the model until it lands in the marked
set, so its false-negative rate is 0.
"""

import logging
from typing import ClassVar

from pydantic import BaseModel, Field

from ..core.prf import TWO_POW_64, derive_subkey
from ..core.rng import RngStream
from ..errors import GenerationError
from ..models.core import DetectionResult, Prompt, SecretKey, TokenSequence
from ..toy_models.markov import MarkovModel, sample
from .base import WatermarkedSampler, WatermarkScheme

logger = logging.getLogger(__name__)

SYNTHETIC_LABEL = b"synthetic"


class SyntheticParams(BaseModel):
    """Synthetic scheme parameters."""

    target_fp_rate: float = Field(..., gt=0.0, lt=1.0, description="Marked-set density eps_pos")
    rejection_cap: int = Field(10_000, ge=1, description="Maximum model draws per sample")


def synthetic_detect(key: SecretKey, params: SyntheticParams, y: TokenSequence) -> DetectionResult:
    h = derive_subkey(key, SYNTHETIC_LABEL + y.to_bytes())
    return DetectionResult(
        statistic=h / TWO_POW_64,
        p_value=None,
        decision=int(h < params.target_fp_rate * TWO_POW_64),
        threshold=params.target_fp_rate,
        scheme="synthetic",
    )


def rejection_generate(
    model: MarkovModel,
    key: SecretKey,
    params: SyntheticParams,
    x: Prompt,
    length: int,
    rng: RngStream,
) -> TokenSequence:
    """
    Draw model outputs until one is marked.

    Raises:
        GenerationError: If rejection_cap draws all miss the marked set
    """
    for _ in range(params.rejection_cap):
        y = sample(model, x, length, rng)
        if synthetic_detect(key, params, y).decision:
            return y
    raise GenerationError(
        f"no marked output after {params.rejection_cap} draws "
        f"(target rate {params.target_fp_rate})"
    )


def synthetic_watermark(
    model: MarkovModel, params: SyntheticParams, rng: RngStream
) -> tuple[SecretKey, WatermarkedSampler]:
    """Fresh key plus a rejection sampler for the marked set."""
    return SyntheticScheme(params).watermark(model, rng)


class SyntheticScheme(WatermarkScheme):
    """Scheme whose false-positive rate is exact by construction."""

    name: ClassVar[str] = "synthetic"

    def __init__(self, params: SyntheticParams):
        super().__init__(params)

    def generate(self, model, key, x, length, rng) -> TokenSequence:
        return rejection_generate(model, key, self.params, x, length, rng)

    def detect(self, key, x, y) -> DetectionResult:
        return synthetic_detect(key, self.params, y)

    def exact_false_positive_rate(self) -> float:
        return self.params.target_fp_rate
