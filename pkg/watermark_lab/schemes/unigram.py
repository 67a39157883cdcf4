"""
Unigram watermark: one fixed green list per key, independent of context.

Token v is green iff derive_subkey(key, b"unigram" + serialize((v,))) mod 2**16
< gamma * 2**16. Detection uses the same z statistic as KGW with a stricter
default threshold (z > 6).
"""

from typing import ClassVar

import numpy as np
from pydantic import BaseModel, Field

from ..core.prf import derive_subkey
from ..core.rng import RngStream
from ..models.core import DetectionResult, Prompt, SecretKey, TokenSequence, serialize_tokens
from ..stats.hypothesis import normal_upper_tail, one_proportion_z
from ..toy_models.markov import MarkovModel
from .base import WatermarkScheme
from .kgw import GREEN_BITS, biased_generate, green_threshold

UNIGRAM_LABEL = b"unigram"


class UnigramParams(BaseModel):
    """Unigram parameters."""

    gamma: float = Field(0.5, gt=0.0, lt=1.0, description="Green-list fraction")
    delta: float = Field(2.0, ge=0.0, description="Logit bias on green tokens (inf allowed)")
    z_threshold: float = Field(6.0, gt=0.0, description="Detect iff z > threshold")


def is_unigram_green(key: SecretKey, token: int, gamma: float) -> bool:
    h = derive_subkey(key, UNIGRAM_LABEL + serialize_tokens((int(token),)))
    return (h % GREEN_BITS) < green_threshold(gamma)


def unigram_green_list(key: SecretKey, gamma: float, vocab_size: int) -> frozenset[int]:
    return frozenset(v for v in range(vocab_size) if is_unigram_green(key, v, gamma))


def unigram_generate(
    model: MarkovModel,
    key: SecretKey,
    params: UnigramParams,
    x: Prompt,
    T: int,
    rng: RngStream,
) -> TokenSequence:
    green = unigram_green_list(key, params.gamma, model.vocabulary.size)
    mask = np.array([v in green for v in range(model.vocabulary.size)])
    return biased_generate(model, x, T, rng, lambda history: mask, params.delta)


def unigram_detect(
    key: SecretKey, params: UnigramParams, x: Prompt, y: TokenSequence
) -> DetectionResult:
    """z = (|y|_G - gamma*T) / sqrt(T*gamma*(1-gamma)); decision z > threshold."""
    if y.length == 0:
        raise ValueError("unigram_detect needs a non-empty sequence")
    count = sum(is_unigram_green(key, token, params.gamma) for token in y.tokens)
    z = one_proportion_z(count, y.length, params.gamma)
    return DetectionResult(
        statistic=z,
        p_value=normal_upper_tail(z),
        decision=int(z > params.z_threshold),
        threshold=params.z_threshold,
        scheme="unigram",
    )


class UnigramScheme(WatermarkScheme):
    """Fixed green-list scheme."""

    name: ClassVar[str] = "unigram"
    default_attack_steps: ClassVar[int] = 300

    def __init__(self, params: UnigramParams | None = None):
        super().__init__(params or UnigramParams())

    def generate(self, model, key, x, length, rng) -> TokenSequence:
        return unigram_generate(model, key, self.params, x, length, rng)

    def detect(self, key, x, y) -> DetectionResult:
        return unigram_detect(key, self.params, x, y)

    def z_score(self, result: DetectionResult) -> float:
        return result.statistic
