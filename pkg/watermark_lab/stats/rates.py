"""
Monte Carlo estimates of a scheme's false-positive and false-negative rates.

Each trial uses its own child stream ("trial/<i>"), so estimates do not depend
on how trials are scheduled.
"""

import logging
from typing import Optional

from ..core.rng import RngStream
from ..errors import GenerationError, SchemeError
from ..models.core import Prompt
from ..models.records import RateEstimate
from ..schemes.base import WatermarkScheme
from ..toy_models.markov import MarkovModel, sample
from .hypothesis import binomial_ci

logger = logging.getLogger(__name__)

MIN_TRIALS = 100


def rate_estimate(successes: int, trials: int, excluded: int = 0) -> RateEstimate:
    """Point estimate plus exact 95% interval."""
    low, high = binomial_ci(successes, trials)
    point = successes / trials
    return RateEstimate(
        point=point, ci_low=min(low, point), ci_high=max(high, point), trials=trials, excluded=excluded
    )


def _check_trials(n_trials: int) -> None:
    if n_trials < MIN_TRIALS:
        raise ValueError(f"rate estimates need at least {MIN_TRIALS} trials, got {n_trials}")


def estimate_false_positive(
    scheme: WatermarkScheme,
    model: MarkovModel,
    x: Prompt,
    n_trials: int,
    rng: RngStream,
    length: Optional[int] = None,
) -> RateEstimate:
    """
    Detection rate on un-watermarked outputs under fresh independent keys.

    Args:
        scheme: Scheme under test
        model: Base (un-watermarked) model
        x: Prompt
        n_trials: Number of (key, output) pairs, >= 100
        rng: Random stream
        length: Output length (defaults to the model's generation length)

    Returns:
        RateEstimate of Pr[Detect = 1]
    """
    _check_trials(n_trials)
    length = length or model.generation_length
    hits = 0
    for i in range(n_trials):
        trial_rng = rng.child(f"trial/{i}")
        key = scheme.keygen(trial_rng.child("key"))
        y = sample(model, x, length, trial_rng.child("sample"))
        hits += scheme.detect(key, x, y).decision
    estimate = rate_estimate(hits, n_trials)
    logger.info(f"{scheme.name} false-positive rate {estimate.point:.5f} over {n_trials} trials")
    return estimate


def estimate_false_negative(
    scheme: WatermarkScheme,
    model: MarkovModel,
    x: Prompt,
    n_trials: int,
    rng: RngStream,
    length: Optional[int] = None,
) -> RateEstimate:
    """
    Miss rate on watermarked outputs, one fresh key per trial.

    Generation failures are excluded from the rate and reported in
    RateEstimate.excluded.

    Raises:
        SchemeError: If every generation failed
    """
    _check_trials(n_trials)
    misses = 0
    failures = 0
    for i in range(n_trials):
        trial_rng = rng.child(f"trial/{i}")
        key, sampler = scheme.watermark(model, trial_rng.child("key"))
        try:
            y = sampler(x, length, trial_rng.child("generate"))
        except GenerationError as e:
            failures += 1
            logger.warning(f"Trial {i}: generation failed, excluded from the rate: {e}")
            continue
        misses += 1 - scheme.detect(key, x, y).decision
    completed = n_trials - failures
    if completed == 0:
        raise SchemeError(f"all {n_trials} generations failed")
    estimate = rate_estimate(misses, completed, excluded=failures)
    logger.info(
        f"{scheme.name} false-negative rate {estimate.point:.5f} over {completed} trials "
        f"({failures} generation failures)"
    )
    return estimate
