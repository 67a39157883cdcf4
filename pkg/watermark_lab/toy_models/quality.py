"""
Reference quality function Q(x, y).

Q is the clamped mean per-token log-likelihood of y under a fixed clean
reference chain, mapped affinely into [0, 1]. It depends only on (x, y), never
on which generator produced y.
"""

import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..core.rng import RngStream
from ..models.core import Prompt, QualityScore, TokenSequence
from .markov import DEFAULT_LOG_FLOOR, MarkovModel, log_likelihood, sample

logger = logging.getLogger(__name__)

CALIBRATION_TARGET = 0.75
# sequences this many standard deviations above the sampled mean reach 1.0
CALIBRATION_SPREAD = 4.0


class ReferenceQuality(BaseModel):
    """Deterministic quality oracle backed by a reference Markov chain."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    reference_model: MarkovModel
    floor: float = Field(DEFAULT_LOG_FLOOR, lt=0, description="Per-token log-probability clamp")
    slope: float = Field(..., gt=0, description="Affine map: slope on mean log-likelihood")
    intercept: float = Field(..., description="Affine map: intercept")

    def mean_log_likelihood(self, x: Prompt, y: TokenSequence) -> float:
        return log_likelihood(self.reference_model, x, y, floor=self.floor) / y.length

    def __call__(self, x: Prompt, y: TokenSequence) -> QualityScore:
        return quality(self, x, y)


def quality(q: ReferenceQuality, x: Prompt, y: TokenSequence) -> QualityScore:
    """
    Score an output.

    Args:
        q: Reference quality definition
        x: Prompt
        y: Non-empty output

    Returns:
        QualityScore in [0, 1]
    """
    raw = q.slope * q.mean_log_likelihood(x, y) + q.intercept
    return QualityScore(value=float(np.clip(raw, 0.0, 1.0)))


def calibrate_quality(
    reference_model: MarkovModel,
    prompt: Prompt,
    rng: RngStream,
    length: int | None = None,
    samples: int = 10_000,
    floor: float = DEFAULT_LOG_FLOOR,
) -> ReferenceQuality:
    """
    Fit the affine map so the reference chain's mean sample scores 0.75.

    The slope puts sequences four standard deviations above the sampled mean at
    1.0. A chain whose samples all share one likelihood (e.g. a uniform chain)
    gets slope 1/|floor|.

    Args:
        reference_model: Clean reference chain
        prompt: Prompt the scores will be taken under
        rng: Random stream for the calibration samples
        length: Output length (defaults to the model's generation length)
        samples: Number of Monte Carlo samples
        floor: Per-token log-probability clamp

    Returns:
        Calibrated ReferenceQuality
    """
    length = length or reference_model.generation_length
    means = np.empty(samples)
    for i in range(samples):
        y = sample(reference_model, prompt, length, rng)
        means[i] = log_likelihood(reference_model, prompt, y, floor=floor) / length
    center = float(means.mean())
    spread = float(means.std())
    if spread > 1e-12:
        slope = (1.0 - CALIBRATION_TARGET) / (CALIBRATION_SPREAD * spread)
    else:
        slope = 1.0 / abs(floor)
    intercept = CALIBRATION_TARGET - slope * center
    logger.info(
        f"Calibrated quality: mean log-lik {center:.4f}, std {spread:.4f}, "
        f"slope {slope:.4f}, intercept {intercept:.4f}"
    )
    return ReferenceQuality(
        reference_model=reference_model, floor=floor, slope=slope, intercept=intercept
    )
