"""
Attacker capabilities: the quality oracle Q and the perturbation oracle P.

Anything callable with these signatures can be handed to the attack; the toy
models provide ReferenceQuality and SpanPerturber.
"""

from typing import Protocol

from ..models.core import Prompt, QualityScore, TokenSequence
from .rng import RngStream


class QualityOracle(Protocol):
    def __call__(self, x: Prompt, y: TokenSequence) -> QualityScore: ...


class PerturbationOracle(Protocol):
    def __call__(self, x: Prompt, y: TokenSequence, rng: RngStream) -> TokenSequence: ...
