"""
Order-k Markov chains over a fixed vocabulary: the lab's generative models.

A model stores one next-token row per length-`order` context, indexed
base-V (context (c0, ..., c_{k-1}) has index sum c_i * V**(k-1-i)). Rows for
contexts that cannot occur may be left undefined (NaN); reaching one while
sampling is a hard error.

When the prompt supplies fewer than `order` tokens, a hidden start context is
drawn from `initial_distribution` and the prompt tokens shift into it. The
ContextState below tracks the exact posterior over that hidden context, so
sampling, likelihoods and next-token distributions all describe the same law.
"""

import itertools
import logging
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..core.rng import RngStream
from ..errors import MarkovModelError
from ..models.core import Prompt, TokenSequence, Vocabulary

logger = logging.getLogger(__name__)

ROW_TOLERANCE = 1e-12
DEFAULT_LOG_FLOOR = -20.0


class MarkovModel(BaseModel):
    """Order-k Markov chain M: X -> Y with a default output length."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    vocabulary: Vocabulary
    order: int = Field(1, ge=1)
    transition_table: np.ndarray = Field(..., description="(V**order, V) rows; NaN rows undefined")
    initial_distribution: np.ndarray = Field(..., description="(V**order,) start-context law")
    generation_length: int = Field(..., ge=1, description="Default output length T")

    @field_validator("transition_table", "initial_distribution", mode="before")
    @classmethod
    def _as_array(cls, value) -> np.ndarray:
        array = np.array(value, dtype=np.float64)
        array.flags.writeable = False
        return array

    @model_validator(mode="after")
    def _check_law(self) -> "MarkovModel":
        n_contexts = self.vocabulary.size**self.order
        table = self.transition_table
        if table.shape != (n_contexts, self.vocabulary.size):
            raise ValueError(
                f"transition_table must have shape ({n_contexts}, {self.vocabulary.size}), "
                f"got {table.shape}"
            )
        if self.initial_distribution.shape != (n_contexts,):
            raise ValueError(f"initial_distribution must have shape ({n_contexts},)")

        defined = ~np.isnan(table).any(axis=1)
        rows = table[defined]
        if (rows < 0).any():
            raise ValueError("transition probabilities must be non-negative")
        bad = np.abs(rows.sum(axis=1) - 1.0) > ROW_TOLERANCE
        if bad.any():
            raise ValueError("every transition row must sum to 1 within 1e-12")

        init = self.initial_distribution
        if (init < 0).any() or abs(init.sum() - 1.0) > ROW_TOLERANCE:
            raise ValueError("initial_distribution must be a probability vector")

        # every context reachable from the start law needs a row
        frontier = list(np.flatnonzero(init > 0))
        seen = set(frontier)
        while frontier:
            index = frontier.pop()
            if not defined[index]:
                raise ValueError(
                    f"context {self.context_tokens(index)} is reachable but has no transition row"
                )
            for token in np.flatnonzero(table[index] > 0):
                nxt = self.shift(index, int(token))
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        return self

    # -- context arithmetic -------------------------------------------------

    @property
    def n_contexts(self) -> int:
        return self.vocabulary.size**self.order

    def context_index(self, context: Sequence[int]) -> int:
        index = 0
        for token in context:
            index = index * self.vocabulary.size + int(token)
        return index

    def context_tokens(self, index: int) -> tuple[int, ...]:
        size = self.vocabulary.size
        tokens = []
        for _ in range(self.order):
            tokens.append(index % size)
            index //= size
        return tuple(reversed(tokens))

    def shift(self, index: int, token: int) -> int:
        return (index * self.vocabulary.size + token) % self.n_contexts

    def row(self, index: int) -> np.ndarray:
        """Next-token distribution of a context; missing rows are a hard error."""
        row = self.transition_table[index]
        if np.isnan(row).any():
            raise MarkovModelError(
                f"no transition row for context {self.context_tokens(index)}"
            )
        return row

    # -- constructors -------------------------------------------------------

    @classmethod
    def uniform(cls, vocab_size: int, order: int = 1, length: int = 4) -> "MarkovModel":
        n = vocab_size**order
        return cls(
            vocabulary=Vocabulary(size=vocab_size),
            order=order,
            transition_table=np.full((n, vocab_size), 1.0 / vocab_size),
            initial_distribution=np.full(n, 1.0 / n),
            generation_length=length,
        )

    @classmethod
    def random_dirichlet(
        cls,
        vocab_size: int,
        order: int,
        length: int,
        concentration: float,
        rng: RngStream,
    ) -> "MarkovModel":
        """Rows drawn i.i.d. from a symmetric Dirichlet; uniform start law."""
        n = vocab_size**order
        table = rng.generator.dirichlet(np.full(vocab_size, concentration), size=n)
        table = table / table.sum(axis=1, keepdims=True)
        return cls(
            vocabulary=Vocabulary(size=vocab_size),
            order=order,
            transition_table=table,
            initial_distribution=np.full(n, 1.0 / n),
            generation_length=length,
        )

    @classmethod
    def from_rows(
        cls,
        vocab_size: int,
        order: int,
        length: int,
        rows: dict[tuple[int, ...], Sequence[float]],
        initial: Optional[Sequence[float]] = None,
    ) -> "MarkovModel":
        """Build from a {context: row} map; contexts not listed stay undefined."""
        n = vocab_size**order
        table = np.full((n, vocab_size), np.nan)
        for context, row in rows.items():
            if len(context) != order:
                raise ValueError(f"context {context} does not have length {order}")
            index = 0
            for token in context:
                index = index * vocab_size + token
            table[index] = row
        if initial is None:
            initial = np.full(n, 1.0 / n)
        return cls(
            vocabulary=Vocabulary(size=vocab_size),
            order=order,
            transition_table=table,
            initial_distribution=initial,
            generation_length=length,
        )


class ContextState:
    """
    Posterior over the running context given prompt and emitted tokens.

    Once `order` tokens have been seen the context is known exactly and the
    state is a single index; before that it is a belief vector over contexts.
    """

    __slots__ = ("model", "index", "belief", "seen")

    def __init__(self, model: MarkovModel, index: Optional[int], belief: Optional[np.ndarray], seen: int):
        self.model = model
        self.index = index
        self.belief = belief
        self.seen = seen

    @classmethod
    def start(cls, model: MarkovModel, prompt_tokens: Sequence[int]) -> "ContextState":
        k = model.order
        if len(prompt_tokens) >= k:
            return cls(model, model.context_index(prompt_tokens[-k:]), None, len(prompt_tokens))
        state = cls(model, None, model.initial_distribution, 0)
        for token in prompt_tokens:
            state = state._forced(int(token))
        return state

    @classmethod
    def after(
        cls, model: MarkovModel, prompt_tokens: Sequence[int], emitted: Sequence[int]
    ) -> "ContextState":
        """State after the prompt and a prefix of emitted tokens."""
        k = model.order
        if len(prompt_tokens) + len(emitted) >= k:
            history = tuple(prompt_tokens) + tuple(emitted)
            return cls(model, model.context_index(history[-k:]), None, len(history))
        state = cls.start(model, prompt_tokens)
        for token in emitted:
            state = state.advanced(int(token))
        return state

    def _shifted_belief(self, weights: np.ndarray, token: int) -> np.ndarray:
        n = self.model.n_contexts
        targets = (np.arange(n) * self.model.vocabulary.size + token) % n
        return np.bincount(targets, weights=weights, minlength=n)

    def _forced(self, token: int) -> "ContextState":
        seen = self.seen + 1
        if seen >= self.model.order and self.index is None:
            # the last `order` tokens are all observed now; recover them from the belief shift
            belief = self._shifted_belief(self.belief, token)
            return ContextState(self.model, int(np.argmax(belief)), None, seen)
        if self.index is not None:
            return ContextState(self.model, self.model.shift(self.index, token), None, seen)
        return ContextState(self.model, None, self._shifted_belief(self.belief, token), seen)

    def distribution(self) -> np.ndarray:
        """Predictive next-token distribution."""
        if self.index is not None:
            return self.model.row(self.index)
        support = np.flatnonzero(self.belief > 0)
        for index in support:
            self.model.row(int(index))
        return self.belief[support] @ self.model.transition_table[support]

    def advanced(self, token: int) -> "ContextState":
        """State after observing `token` emitted by the chain."""
        if self.index is not None:
            return ContextState(self.model, self.model.shift(self.index, token), None, self.seen + 1)
        weights = self.belief * np.nan_to_num(self.model.transition_table[:, token])
        total = weights.sum()
        if total <= 0:
            return self._forced(token)
        seen = self.seen + 1
        belief = self._shifted_belief(weights / total, token)
        if seen >= self.model.order:
            return ContextState(self.model, int(np.argmax(belief)), None, seen)
        return ContextState(self.model, None, belief, seen)


def draw_token(distribution: np.ndarray, u: float) -> int:
    """Inverse-CDF draw: first token whose cumulative mass exceeds u * total."""
    cumulative = np.cumsum(distribution)
    index = int(np.searchsorted(cumulative, u * cumulative[-1], side="right"))
    return min(index, len(distribution) - 1)


def _check_prompt(model: MarkovModel, prompt: Prompt) -> None:
    model.vocabulary.check(prompt.tokens, what="prompt")


def sample(model: MarkovModel, prompt: Prompt, length: int, rng: RngStream) -> TokenSequence:
    """
    Draw an output of the given length from the chain's exact law.

    Args:
        model: Generative model
        prompt: Prompt whose tokens seed the running context
        length: Output length (>= 1)
        rng: Random stream

    Returns:
        Sampled TokenSequence

    Raises:
        MarkovModelError: If a context without a transition row is reached
    """
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    _check_prompt(model, prompt)
    state = ContextState.start(model, prompt.tokens)
    tokens = []
    for _ in range(length):
        token = draw_token(state.distribution(), rng.uniform())
        tokens.append(token)
        state = state.advanced(token)
    return TokenSequence(tokens=tuple(tokens))


def log_likelihood(
    model: MarkovModel,
    prompt: Prompt,
    y: TokenSequence,
    floor: float = DEFAULT_LOG_FLOOR,
) -> float:
    """
    Sum of per-token log probabilities, each clamped below at `floor`.

    Args:
        model: Scoring model
        prompt: Prompt context
        y: Non-empty output
        floor: Per-token log-probability clamp (nats)

    Returns:
        Finite log-likelihood
    """
    if y.length == 0:
        raise ValueError("log_likelihood needs a non-empty sequence")
    k = model.order
    offset = len(prompt.tokens)
    # outputs before `start` have a partially hidden context
    start = min(max(0, k - offset), y.length)

    total = 0.0
    state = ContextState.start(model, prompt.tokens)
    for token in y.tokens[:start]:
        p = float(state.distribution()[token])
        total += max(np.log(p), floor) if p > 0 else floor
        state = state.advanced(token)

    if start < y.length:
        history = np.asarray(prompt.tokens + y.tokens, dtype=np.int64)
        windows = sliding_window_view(history, k)[offset + start - k : offset + y.length - k]
        weights = model.vocabulary.size ** np.arange(k - 1, -1, -1)
        contexts = windows @ weights
        probs = model.transition_table[contexts, history[offset + start :]]
        if np.isnan(probs).any():
            bad = int(contexts[np.flatnonzero(np.isnan(probs))[0]])
            raise MarkovModelError(f"no transition row for context {model.context_tokens(bad)}")
        with np.errstate(divide="ignore"):
            logs = np.log(probs)
        total += float(np.maximum(logs, floor).sum())
    return total


def exact_law(model: MarkovModel, prompt: Prompt, length: int) -> dict[tuple[int, ...], float]:
    """Probability of every output of the given length (small spaces only)."""
    law = {}
    for tokens in itertools.product(range(model.vocabulary.size), repeat=length):
        law[tokens] = float(
            np.exp(log_likelihood(model, prompt, TokenSequence(tokens=tokens), floor=-np.inf))
        )
    return law
