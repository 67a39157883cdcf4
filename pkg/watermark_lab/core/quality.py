"""
Quality comparison under a tie band.
"""

from ..models.core import QualityScore, Verdict

DEFAULT_TIE_BAND = 0.02


def compare_quality(q_new: QualityScore, q_ref: QualityScore, delta: float = DEFAULT_TIE_BAND) -> Verdict:
    """
    Compare a candidate quality with a reference quality.

    Args:
        q_new: Candidate score
        q_ref: Reference score
        delta: Tie band (scores closer than delta are a tie)

    Returns:
        win if q_new - q_ref > delta, lose if q_ref - q_new > delta, tie otherwise
    """
    if delta < 0:
        raise ValueError(f"tie band must be non-negative, got {delta}")
    if q_new.value - q_ref.value > delta:
        return Verdict.win
    if q_ref.value - q_new.value > delta:
        return Verdict.lose
    return Verdict.tie
