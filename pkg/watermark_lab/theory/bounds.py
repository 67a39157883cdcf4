"""
Quantities of the attack-success guarantee.

For quality floor q at or below the v-th percentile of watermarked-output
quality, a walk of t = t_mix + t_err proposals succeeds with probability at
least

    (1 - v/100) * (1 - eps_pos) * (1 - eps_dist) * (1 - binomial_tail(t, t_err, eps_pert)).
"""

import logging
import math
from typing import Sequence

import numpy as np

from ..core.oracles import QualityOracle
from ..core.rng import RngStream
from ..errors import GenerationError, PreconditionError
from ..models.core import Prompt, TokenSequence
from ..schemes.base import WatermarkScheme
from ..stats.hypothesis import binomial_tail
from ..toy_models.markov import MarkovModel

logger = logging.getLogger(__name__)

MIN_PERCENTILE_SAMPLES = 100
MAX_T_ERR = 100_000
MAX_KEY_REDRAWS = 100


def _check_rate(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value}")


def watermarked_outputs(
    scheme: WatermarkScheme,
    model: MarkovModel,
    x: Prompt,
    samples: int,
    rng: RngStream,
    length: int | None = None,
) -> tuple[list[TokenSequence], int]:
    """
    Watermarked outputs, each under a fresh key drawn from child "sample/<i>".

    A key whose sampler raises GenerationError (a synthetic key with an empty
    marked set, say) is skipped and sample i is redrawn from
    "sample/<i>/redraw/<r>".

    Returns:
        Tuple of (outputs, number of skipped keys)

    Raises:
        GenerationError: If MAX_KEY_REDRAWS keys in a row fail for one sample
    """
    outputs: list[TokenSequence] = []
    skipped = 0
    for i in range(samples):
        sample_rng = rng.child(f"sample/{i}")
        attempt = sample_rng
        for r in range(MAX_KEY_REDRAWS + 1):
            _, sampler = scheme.watermark(model, attempt.child("key"))
            try:
                outputs.append(sampler(x, length, attempt.child("generate")))
                break
            except GenerationError as e:
                skipped += 1
                logger.warning(f"Sample {i}: key skipped: {e}")
                attempt = sample_rng.child(f"redraw/{r}")
        else:
            raise GenerationError(f"sample {i}: {MAX_KEY_REDRAWS + 1} keys in a row produced no output")
    if skipped:
        logger.warning(f"Skipped {skipped} keys while drawing {samples} watermarked outputs")
    return outputs, skipped


def watermarked_qualities(
    scheme: WatermarkScheme,
    model: MarkovModel,
    x: Prompt,
    quality: QualityOracle,
    samples: int,
    rng: RngStream,
    length: int | None = None,
) -> np.ndarray:
    """Q(x, y) of `samples` watermarked outputs drawn by `watermarked_outputs`."""
    if samples < MIN_PERCENTILE_SAMPLES:
        raise ValueError(f"quality percentiles need at least {MIN_PERCENTILE_SAMPLES} samples")
    outputs, _ = watermarked_outputs(scheme, model, x, samples, rng, length)
    return np.array([quality(x, y).value for y in outputs])


def quality_percentile(
    scheme: WatermarkScheme,
    model: MarkovModel,
    x: Prompt,
    quality: QualityOracle,
    v: float,
    samples: int,
    rng: RngStream,
    length: int | None = None,
) -> float:
    """
    Empirical v-th percentile of Q(x, y) over fresh (key, watermarked y) draws.

    Args:
        scheme: Watermarking scheme
        model: Generative model
        x: Prompt
        quality: Quality oracle
        v: Percentile in [0, 100]
        samples: Number of draws, >= 100
        rng: Random stream (sample i uses child "sample/<i>")
        length: Output length (defaults to the model's)

    Returns:
        Percentile estimate
    """
    if not 0.0 <= v <= 100.0:
        raise ValueError(f"percentile must be in [0, 100], got {v}")
    scores = watermarked_qualities(scheme, model, x, quality, samples, rng, length)
    estimate = float(np.percentile(scores, v))
    logger.info(f"Quality percentile v={v} for prompt '{x.identifier}': {estimate:.6f}")
    return estimate


def q_min(
    scheme: WatermarkScheme,
    pairs: Sequence[tuple[MarkovModel, Prompt]],
    quality: QualityOracle,
    v: float,
    samples: int,
    rng: RngStream,
) -> float:
    """Smallest v-th quality percentile over the supplied (model, prompt) pairs."""
    if not pairs:
        raise ValueError("q_min needs at least one (model, prompt) pair")
    return min(
        quality_percentile(scheme, model, x, quality, v, samples, rng.child(f"pair/{i}"))
        for i, (model, x) in enumerate(pairs)
    )


def success_lower_bound(
    v: float,
    eps_pos: float,
    eps_dist: float,
    eps_pert: float,
    t: int,
    t_err: int,
) -> float:
    """
    Lower bound on the erasure success probability.

    Args:
        v: Quality percentile in [0, 100]
        eps_pos: False-positive rate of the scheme
        eps_dist: Target distance to stationarity
        eps_pert: Perturbation oracle preservation rate
        t: Total proposals
        t_err: Tolerated rejections, <= t

    Returns:
        Bound in [0, 1]
    """
    if not 0.0 <= v <= 100.0:
        raise ValueError(f"percentile must be in [0, 100], got {v}")
    for name, value in (("eps_pos", eps_pos), ("eps_dist", eps_dist), ("eps_pert", eps_pert)):
        _check_rate(name, value)
    tail = binomial_tail(t, t_err, eps_pert)
    return (1.0 - v / 100.0) * (1.0 - eps_pos) * (1.0 - eps_dist) * (1.0 - tail)


def simple_success_estimate(eps_pos: float) -> float:
    """Median-quality, fully mixed, negligible-tail estimate (1 - eps_pos) / 2."""
    _check_rate("eps_pos", eps_pos)
    return (1.0 - eps_pos) / 2.0


def simple_query_budget(t_max: int, eps_pert: float) -> int:
    """Expected proposals needed for t_max accepted steps: ceil(t_max / eps_pert)."""
    if not 0.0 < eps_pert <= 1.0:
        raise ValueError(f"eps_pert must be in (0, 1], got {eps_pert}")
    return math.ceil(t_max / eps_pert)


def choose_t_err(t_mix: int, eps_pert: float, tail_target: float) -> int:
    """
    Smallest t_err with binomial_tail(t_mix + t_err, t_err, eps_pert) <= tail_target.

    Raises:
        PreconditionError: If no t_err up to 100000 reaches the target
    """
    if t_mix < 0:
        raise ValueError(f"t_mix must be >= 0, got {t_mix}")

    def tail(t_err: int) -> float:
        return binomial_tail(t_mix + t_err, t_err, eps_pert)

    if tail(0) <= tail_target:
        return 0
    # the tail is Pr[fewer than t_mix accepts], decreasing in t_err
    high = 1
    while tail(high) > tail_target:
        if high >= MAX_T_ERR:
            raise PreconditionError(
                f"binomial tail stays above {tail_target} for every t_err <= {MAX_T_ERR} "
                f"(eps_pert={eps_pert})"
            )
        high = min(2 * high, MAX_T_ERR)
    low = high // 2
    while high - low > 1:
        middle = (low + high) // 2
        if tail(middle) <= tail_target:
            high = middle
        else:
            low = middle
    return high
