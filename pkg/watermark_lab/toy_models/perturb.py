"""
Span-resampling perturbation oracle P(x, y).

One call picks a uniformly random span of `span_length` positions and refills
it token by token from a causal proposal chain, conditioned on everything to
the left of the span and truncated to its top-p nucleus. Positions outside the
span are untouched, so the output has the same length as the input.

The same arithmetic is exposed as an exact law (perturbation_kernel) for the
graph constructions in the theory package.
"""

import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..core.rng import RngStream
from ..models.core import Prompt, TokenSequence
from .enumeration import DEFAULT_ENUMERATION_CAP, check_enumerable, sequence_index
from .markov import ContextState, MarkovModel, draw_token

logger = logging.getLogger(__name__)

NUCLEUS_SLACK = 1e-12


class SpanPerturber(BaseModel):
    """Mask-and-infill perturbation oracle over a fixed-length output space."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    proposal_model: MarkovModel
    span_length: int = Field(..., ge=1, description="Number of contiguous positions resampled")
    top_p: float = Field(0.95, gt=0.0, le=1.0, description="Nucleus mass kept per proposal step")

    def __call__(self, x: Prompt, y: TokenSequence, rng: RngStream) -> TokenSequence:
        return perturb(self, x, y, rng)


def top_p_filter(distribution: np.ndarray, top_p: float) -> np.ndarray:
    """
    Keep the smallest set of most likely tokens whose mass reaches top_p.

    Ties are broken by token index. The kept mass is renormalized.
    """
    total = distribution.sum()
    probs = distribution / total
    if top_p >= 1.0:
        return probs
    order = np.argsort(-probs, kind="stable")
    cumulative = np.cumsum(probs[order])
    keep = min(int(np.searchsorted(cumulative, top_p - NUCLEUS_SLACK)) + 1, len(probs))
    filtered = np.zeros_like(probs)
    filtered[order[:keep]] = probs[order[:keep]]
    return filtered / filtered.sum()


def _check_span(p: SpanPerturber, y: TokenSequence) -> int:
    if y.length < p.span_length:
        raise ValueError(f"sequence of length {y.length} is shorter than span {p.span_length}")
    return y.length - p.span_length + 1


def perturb(p: SpanPerturber, x: Prompt, y: TokenSequence, rng: RngStream) -> TokenSequence:
    """
    Resample one random span of y.

    Args:
        p: Perturber definition
        x: Prompt (its tokens are the leftmost context)
        y: Sequence to perturb, length >= span_length
        rng: Random stream

    Returns:
        Sequence of the same length differing from y in at most span_length positions
    """
    n_starts = _check_span(p, y)
    start = rng.integer(n_starts)
    state = ContextState.after(p.proposal_model, x.tokens, y.tokens[:start])
    fill = []
    for _ in range(p.span_length):
        token = draw_token(top_p_filter(state.distribution(), p.top_p), rng.uniform())
        fill.append(token)
        state = state.advanced(token)
    tokens = y.tokens[:start] + tuple(fill) + y.tokens[start + p.span_length :]
    return TokenSequence(tokens=tokens)


def perturbation_kernel(
    p: SpanPerturber,
    x: Prompt,
    y: TokenSequence,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> np.ndarray:
    """
    Exact output law of perturb(p, x, y, .).

    Args:
        p: Perturber definition
        x: Prompt
        y: Input sequence
        cap: Enumeration cap on V**length

    Returns:
        Probability vector over all sequences of y's length, indexed lexicographically

    Raises:
        EnumerationCapError: If the output space exceeds the cap
    """
    vocab_size = p.proposal_model.vocabulary.size
    size = check_enumerable(vocab_size, y.length, cap)
    n_starts = _check_span(p, y)
    law = np.zeros(size)

    for start in range(n_starts):
        prefix = y.tokens[:start]
        suffix = y.tokens[start + p.span_length :]
        # (fill so far, probability, proposal state)
        frontier = [((), 1.0 / n_starts, ContextState.after(p.proposal_model, x.tokens, prefix))]
        for _ in range(p.span_length):
            expanded = []
            for fill, mass, state in frontier:
                probs = top_p_filter(state.distribution(), p.top_p)
                for token in np.flatnonzero(probs > 0):
                    token = int(token)
                    expanded.append((fill + (token,), mass * probs[token], state.advanced(token)))
            frontier = expanded
        for fill, mass, _ in frontier:
            law[sequence_index(prefix + fill + suffix, vocab_size)] += mass
    return law


def kernel_matrix(
    p: SpanPerturber,
    x: Prompt,
    outputs: list[TokenSequence],
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> np.ndarray:
    """
    Dense kernel K[i, j] = Pr[outputs[j] = P(x, outputs[i])].

    `outputs` must be the full lexicographic enumeration of the output space.
    """
    logger.info(f"Building {len(outputs)}x{len(outputs)} perturbation kernel")
    return np.vstack([perturbation_kernel(p, x, y, cap=cap) for y in outputs])
