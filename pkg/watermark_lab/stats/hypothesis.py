"""
Hypothesis-test utilities shared by the detectors and the theory bounds.
"""

import math
from typing import Callable

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from ..core.rng import RngStream

CONFIDENCE_LEVEL = 0.95


def one_proportion_z(count: int, T: int, gamma: float) -> float:
    """
    One-proportion z statistic (count - gamma*T) / sqrt(T*gamma*(1-gamma)).

    Args:
        count: Observed successes (green tokens), 0 <= count <= T
        T: Number of observations
        gamma: Null success probability, 0 < gamma < 1

    Returns:
        z score

    Raises:
        ValueError: If T is 0 or the arguments are out of range
    """
    if T <= 0:
        raise ValueError("one_proportion_z needs T >= 1")
    if not 0 <= count <= T:
        raise ValueError(f"count {count} outside [0, {T}]")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    return (count - gamma * T) / math.sqrt(T * gamma * (1.0 - gamma))


def normal_upper_tail(z: float) -> float:
    """One-sided p-value Pr[Z > z] under the standard normal."""
    return float(stats.norm.sf(z))


def permutation_p_value(
    observed: float,
    resampler: Callable[[RngStream], float],
    resamples: int,
    rng: RngStream,
) -> float:
    """
    Add-one permutation p-value, lower tail.

    Small statistics count as evidence, so the p-value is
    (1 + #{resampled <= observed}) / (1 + resamples). It is never 0; its floor
    is 1 / (1 + resamples).

    Args:
        observed: Statistic of the data under test
        resampler: Draws one statistic under the null
        resamples: Number of null draws (>= 1)
        rng: Random stream passed to the resampler

    Returns:
        p-value in (0, 1]
    """
    if resamples < 1:
        raise ValueError(f"resamples must be >= 1, got {resamples}")
    at_most = sum(1 for _ in range(resamples) if resampler(rng) <= observed)
    return (1 + at_most) / (1 + resamples)


def binomial_tail(t: int, t_err: int, eps_pert: float) -> float:
    """
    Pr[Bin(t, eps_pert) <= t - t_err - 1], summed in log space.

    This is the probability that fewer than t - t_err of t proposals are
    accepted when each is accepted independently with probability eps_pert.

    Args:
        t: Number of proposals
        t_err: Tolerated rejections, 0 <= t_err <= t
        eps_pert: Per-proposal acceptance probability in [0, 1]

    Returns:
        Tail probability in [0, 1]
    """
    if not 0 <= t_err <= t:
        raise ValueError(f"need 0 <= t_err <= t, got t_err={t_err}, t={t}")
    if not 0.0 <= eps_pert <= 1.0:
        raise ValueError(f"eps_pert must be in [0, 1], got {eps_pert}")
    upper = t - t_err - 1
    if upper < 0:
        return 0.0
    terms = stats.binom.logpmf(np.arange(upper + 1), t, eps_pert)
    with np.errstate(divide="ignore"):
        total = logsumexp(terms)
    return float(min(1.0, np.exp(total)))


def binomial_ci(successes: int, trials: int) -> tuple[float, float]:
    """
    Exact (Clopper-Pearson) 95% interval for a binomial proportion.

    Raises:
        ValueError: If trials is 0 or successes is out of range
    """
    if trials <= 0:
        raise ValueError("binomial_ci needs at least one trial")
    if not 0 <= successes <= trials:
        raise ValueError(f"successes {successes} outside [0, {trials}]")
    interval = stats.binomtest(successes, trials).proportion_ci(
        confidence_level=CONFIDENCE_LEVEL, method="exact"
    )
    return float(interval.low), float(interval.high)
