"""
EXP (exponential-minimum) watermark.

The key expands into a sequence xi_1..xi_n of per-token uniforms,
xi_i(v) = ((h >> 11) + 0.5) / 2**53 with h = derive_subkey(key, b"exp" +
serialize((i, v))). Generation at position i emits argmax_v xi_i(v)**(1/p_i(v)),
which is a draw from p_i for a uniformly random key, so the output law
marginalized over keys is the model's own.

Detection aligns length-k windows of y against length-k windows of the key
sequence and takes the minimum summed cost -log xi_j(y_i) over offsets. The
p-value compares that cost against fresh uniform key sequences.
"""

import logging
from functools import lru_cache
from typing import ClassVar, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from ..core.prf import derive_subkey, subkey_unit
from ..core.rng import RngStream
from ..errors import SchemeError
from ..models.core import DetectionResult, Prompt, SecretKey, TokenSequence, serialize_tokens
from ..stats.hypothesis import permutation_p_value
from ..toy_models.markov import ContextState, MarkovModel
from .base import WatermarkScheme

logger = logging.getLogger(__name__)

EXP_LABEL = b"exp"
NULL_LABEL = b"exp-null"


class ExpParams(BaseModel):
    """EXP parameters."""

    key_sequence_length: int = Field(256, ge=1, description="Length n of the key sequence")
    block_length: Optional[int] = Field(None, ge=1, description="Alignment window k (default: T)")
    resamples: int = Field(5000, ge=1, description="Permutation-test null draws")
    p_threshold: float = Field(0.05, gt=0.0, le=1.0, description="Detect iff p < threshold")


@lru_cache(maxsize=256)
def _key_sequence(key_bytes: bytes, n: int, vocab_size: int) -> np.ndarray:
    key = SecretKey(key_bytes=key_bytes)
    xi = np.array(
        [[subkey_unit(key, EXP_LABEL + serialize_tokens((i, v))) for v in range(vocab_size)] for i in range(n)]
    )
    xi.flags.writeable = False
    return xi


def exp_key_sequence(key: SecretKey, n: int, vocab_size: int) -> np.ndarray:
    """Key sequence as an (n, V) array of uniforms in (0, 1)."""
    return _key_sequence(key.key_bytes, n, vocab_size)


def exp_generate(
    model: MarkovModel,
    key: SecretKey,
    params: ExpParams,
    x: Prompt,
    T: int,
) -> TokenSequence:
    """
    Deterministic exponential-minimum sampling.

    Raises:
        SchemeError: If T exceeds the key sequence length
    """
    if T < 1:
        raise ValueError(f"length must be >= 1, got {T}")
    if T > params.key_sequence_length:
        raise SchemeError(
            f"output length {T} exceeds key sequence length {params.key_sequence_length}"
        )
    model.vocabulary.check(x.tokens, what="prompt")
    xi = exp_key_sequence(key, params.key_sequence_length, model.vocabulary.size)
    log_xi = np.log(xi)
    state = ContextState.start(model, x.tokens)
    tokens = []
    for i in range(T):
        p = state.distribution()
        with np.errstate(divide="ignore"):
            scores = np.where(p > 0, log_xi[i] / np.where(p > 0, p, 1.0), -np.inf)
        token = int(np.argmax(scores))
        tokens.append(token)
        state = state.advanced(token)
    return TokenSequence(tokens=tuple(tokens))


def _min_window_cost(neg_log_xi: np.ndarray, y: np.ndarray, k: int) -> float:
    T = len(y)
    n = neg_log_xi.shape[0]
    steps = np.arange(k)
    # windows: text offset a in [0, T-k], key offset b in [0, n-k]
    text_tokens = y[np.arange(T - k + 1)[:, None, None] + steps]
    key_rows = np.arange(n - k + 1)[None, :, None] + steps
    return float(neg_log_xi[key_rows, text_tokens].sum(axis=2).min())


def exp_alignment_cost(key_sequence: np.ndarray, y: TokenSequence, k: int) -> float:
    """
    Minimum summed cost -log xi_j(y_i) over aligned length-k windows.

    Args:
        key_sequence: (n, V) array of key uniforms
        y: Output under test
        k: Window length, 1 <= k <= min(T, n)

    Returns:
        Minimum alignment cost
    """
    if not 1 <= k <= y.length:
        raise ValueError(f"block length {k} must be in [1, {y.length}]")
    if k > key_sequence.shape[0]:
        raise ValueError(f"block length {k} exceeds key sequence length {key_sequence.shape[0]}")
    return _min_window_cost(-np.log(key_sequence), y.as_array(), k)


def exp_detect(
    key: SecretKey,
    params: ExpParams,
    y: TokenSequence,
    vocab_size: int,
    rng: Optional[RngStream] = None,
    key_space: Optional[Sequence[SecretKey]] = None,
) -> DetectionResult:
    """
    Permutation test of the alignment cost.

    Args:
        key: Secret key
        params: EXP parameters
        y: Output under test
        vocab_size: Vocabulary size of the key sequence
        rng: Stream for the null key draws; derived from (key, y) when omitted,
            which keeps detection a deterministic function of its inputs
        key_space: Alternative keys to rank against exhaustively instead of
            drawing fresh uniform key sequences

    Returns:
        DetectionResult with the alignment cost as statistic and decision p < p_threshold
    """
    k = params.block_length or y.length
    if y.length == 0:
        raise ValueError("exp_detect needs a non-empty sequence")
    tokens = y.as_array()
    observed = exp_alignment_cost(exp_key_sequence(key, params.key_sequence_length, vocab_size), y, k)
    shape = (params.key_sequence_length, vocab_size)

    if key_space is not None:
        others = iter(key_space)

        def resampler(_: RngStream) -> float:
            xi = exp_key_sequence(next(others), params.key_sequence_length, vocab_size)
            return _min_window_cost(-np.log(xi), tokens, k)

        resamples = len(key_space)
    else:

        def resampler(stream: RngStream) -> float:
            # generator.random is in [0, 1); 1 - u is in (0, 1]
            xi = 1.0 - stream.generator.random(shape)
            return _min_window_cost(-np.log(xi), tokens, k)

        resamples = params.resamples

    if rng is None:
        rng = RngStream(derive_subkey(key, NULL_LABEL + y.to_bytes()), "exp/null")
    p_value = permutation_p_value(observed, resampler, resamples, rng)
    return DetectionResult(
        statistic=observed,
        p_value=p_value,
        decision=int(p_value < params.p_threshold),
        threshold=params.p_threshold,
        scheme="exp",
    )


class ExpScheme(WatermarkScheme):
    """Distortion-free exponential-minimum scheme."""

    name: ClassVar[str] = "exp"
    default_attack_steps: ClassVar[int] = 300

    def __init__(self, params: ExpParams | None = None, vocab_size: Optional[int] = None):
        super().__init__(params or ExpParams())
        self.vocab_size = vocab_size

    def generate(self, model, key, x, length, rng) -> TokenSequence:
        return exp_generate(model, key, self.params, x, length)

    def detect(self, key, x, y) -> DetectionResult:
        if self.vocab_size is None:
            raise SchemeError("EXP detection needs the vocabulary size; pass vocab_size")
        return exp_detect(key, self.params, y, self.vocab_size)
