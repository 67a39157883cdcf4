"""
Measuring how often the perturbation oracle preserves quality (eps_pert).
"""

import logging
from typing import Sequence

from ..core.oracles import PerturbationOracle, QualityOracle
from ..core.quality import DEFAULT_TIE_BAND, compare_quality
from ..core.rng import RngStream
from ..models.core import Prompt, TokenSequence, Verdict
from ..models.records import RateEstimate
from ..stats.rates import rate_estimate

logger = logging.getLogger(__name__)


def measure_preservation(
    perturber: PerturbationOracle,
    quality: QualityOracle,
    x: Prompt,
    inputs: Sequence[TokenSequence],
    delta: float = DEFAULT_TIE_BAND,
    rng: RngStream | None = None,
    calls_per_input: int = 1,
) -> RateEstimate:
    """
    Fraction of perturbation calls whose output does not lose on quality.

    Args:
        perturber: Perturbation oracle P
        quality: Quality oracle Q
        x: Prompt
        inputs: Sequences to perturb
        delta: Quality tie band
        rng: Random stream (call j on input i uses child "call/<i>/<j>")
        calls_per_input: Perturbation calls per input

    Returns:
        RateEstimate of eps_pert
    """
    if not inputs:
        raise ValueError("measure_preservation needs at least one input")
    rng = rng or RngStream(0, "preservation")
    preserved = 0
    calls = 0
    for i, y in enumerate(inputs):
        q_ref = quality(x, y)
        for j in range(calls_per_input):
            proposal = perturber(x, y, rng.child(f"call/{i}/{j}"))
            preserved += compare_quality(quality(x, proposal), q_ref, delta) != Verdict.lose
            calls += 1
    estimate = rate_estimate(preserved, calls)
    logger.info(f"Measured eps_pert = {estimate.point:.4f} over {calls} calls")
    return estimate
