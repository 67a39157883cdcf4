"""
KGW green-list watermark.

Before each token the previous `context_width` tokens are hashed with the key
to select a green list covering about a gamma fraction of the vocabulary;
green tokens get `delta` added to their log-weight. Detection recounts green
tokens from the output's own contexts and applies a one-proportion z-test.

Membership is bit-exact: token v is green for context c iff
derive_subkey(key, serialize(c + (v,))) mod 2**16 < gamma * 2**16.
"""

import logging
from functools import lru_cache
from typing import ClassVar, Sequence

import numpy as np
from pydantic import BaseModel, Field

from ..core.prf import derive_subkey
from ..core.rng import RngStream
from ..models.core import DetectionResult, Prompt, SecretKey, TokenSequence, serialize_tokens
from ..stats.hypothesis import normal_upper_tail, one_proportion_z
from ..toy_models.markov import ContextState, MarkovModel, draw_token
from .base import WatermarkScheme

logger = logging.getLogger(__name__)

GREEN_BITS = 1 << 16


class KgwParams(BaseModel):
    """KGW parameters."""

    gamma: float = Field(0.5, gt=0.0, lt=1.0, description="Green-list fraction")
    delta: float = Field(2.0, ge=0.0, description="Logit bias on green tokens (inf allowed)")
    context_width: int = Field(1, ge=1, description="Previous tokens hashed into the green list")
    z_threshold: float = Field(4.0, gt=0.0, description="Detect iff z > threshold")


def green_threshold(gamma: float) -> float:
    return gamma * GREEN_BITS


def is_green(key: SecretKey, context: Sequence[int], token: int, gamma: float) -> bool:
    h = derive_subkey(key, serialize_tokens(tuple(context) + (int(token),)))
    return (h % GREEN_BITS) < green_threshold(gamma)


@lru_cache(maxsize=65536)
def _green_mask(key_bytes: bytes, context: tuple[int, ...], vocab_size: int, gamma: float) -> np.ndarray:
    key = SecretKey(key_bytes=key_bytes)
    mask = np.array([is_green(key, context, v, gamma) for v in range(vocab_size)])
    mask.flags.writeable = False
    return mask


def green_mask(key: SecretKey, context: Sequence[int], vocab_size: int, gamma: float) -> np.ndarray:
    """Boolean green-list indicator over the vocabulary."""
    return _green_mask(key.key_bytes, tuple(int(t) for t in context), vocab_size, gamma)


def kgw_green_list(
    key: SecretKey, context: Sequence[int], gamma: float, vocab_size: int
) -> frozenset[int]:
    """
    Green tokens for one context window.

    Args:
        key: Secret key
        context: Previous tokens (up to context_width; shorter at the start)
        gamma: Green-list fraction
        vocab_size: Vocabulary size

    Returns:
        Set of green token indices
    """
    return frozenset(int(v) for v in np.flatnonzero(green_mask(key, context, vocab_size, gamma)))


def bias_distribution(distribution: np.ndarray, mask: np.ndarray, delta: float) -> np.ndarray:
    """
    Add delta to the log-weight of green tokens and renormalize.

    delta = inf restricts sampling to green tokens of positive probability,
    falling back to the unbiased row when there are none.
    """
    if delta == 0:
        return distribution
    if np.isinf(delta):
        green = np.where(mask, distribution, 0.0)
        total = green.sum()
        if total > 0:
            return green / total
        return distribution / distribution.sum()
    with np.errstate(divide="ignore"):
        logits = np.log(distribution) + np.where(mask, delta, 0.0)
    logits -= logits.max()
    weights = np.exp(logits)
    return weights / weights.sum()


def _context(history: Sequence[int], width: int) -> tuple[int, ...]:
    return tuple(history[-width:])


def biased_generate(
    model: MarkovModel,
    x: Prompt,
    length: int,
    rng: RngStream,
    mask_for,
    delta: float,
) -> TokenSequence:
    """Token-by-token sampling with a per-position green mask."""
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    model.vocabulary.check(x.tokens, what="prompt")
    state = ContextState.start(model, x.tokens)
    history = list(x.tokens)
    tokens = []
    for _ in range(length):
        dist = bias_distribution(state.distribution(), mask_for(history), delta)
        token = draw_token(dist, rng.uniform())
        tokens.append(token)
        history.append(token)
        state = state.advanced(token)
    return TokenSequence(tokens=tuple(tokens))


def kgw_generate(
    model: MarkovModel,
    key: SecretKey,
    params: KgwParams,
    x: Prompt,
    T: int,
    rng: RngStream,
) -> TokenSequence:
    """
    Sample T tokens with green tokens promoted by delta.

    With delta = 0 the draws are exactly those of toy_models.markov.sample for
    the same random stream.
    """
    size = model.vocabulary.size
    return biased_generate(
        model,
        x,
        T,
        rng,
        lambda history: green_mask(key, _context(history, params.context_width), size, params.gamma),
        params.delta,
    )


def count_green(key: SecretKey, params: KgwParams, x: Prompt, y: TokenSequence) -> int:
    history = x.tokens + y.tokens
    offset = len(x.tokens)
    return sum(
        is_green(key, _context(history[: offset + i], params.context_width), token, params.gamma)
        for i, token in enumerate(y.tokens)
    )


def kgw_detect(key: SecretKey, params: KgwParams, x: Prompt, y: TokenSequence) -> DetectionResult:
    """
    One-proportion z-test on the green-token count.

    Args:
        key: Secret key
        params: KGW parameters
        x: Prompt (its last tokens seed the first context)
        y: Output under test, non-empty

    Returns:
        DetectionResult with z statistic, one-sided normal p-value and z > threshold decision
    """
    if y.length == 0:
        raise ValueError("kgw_detect needs a non-empty sequence")
    z = one_proportion_z(count_green(key, params, x, y), y.length, params.gamma)
    return DetectionResult(
        statistic=z,
        p_value=normal_upper_tail(z),
        decision=int(z > params.z_threshold),
        threshold=params.z_threshold,
        scheme="kgw",
    )


class KgwScheme(WatermarkScheme):
    """Context-keyed green-list scheme."""

    name: ClassVar[str] = "kgw"
    default_attack_steps: ClassVar[int] = 200

    def __init__(self, params: KgwParams | None = None):
        super().__init__(params or KgwParams())

    def generate(self, model, key, x, length, rng) -> TokenSequence:
        return kgw_generate(model, key, self.params, x, length, rng)

    def detect(self, key, x, y) -> DetectionResult:
        return kgw_detect(key, self.params, x, y)

    def z_score(self, result: DetectionResult) -> float:
        return result.statistic
