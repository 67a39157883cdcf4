"""
Base class for watermarking schemes.

A scheme is the (Watermark, Detect) pair: `watermark` draws a fresh key and
returns a sampler bound to it; `detect` is a deterministic function of
(key, prompt, output). Concrete schemes are registered by name in
`schemes.registry`.
"""

from abc import ABC, abstractmethod
from typing import ClassVar, Optional

from pydantic import BaseModel
from scipy import stats

from ..core.rng import RngStream
from ..models.core import DetectionResult, Prompt, SecretKey, TokenSequence
from ..toy_models.markov import MarkovModel


class WatermarkedSampler:
    """Watermarked generator M_k bound to one model and one key."""

    def __init__(self, scheme: "WatermarkScheme", model: MarkovModel, key: SecretKey):
        self.scheme = scheme
        self.model = model
        self.key = key

    def __call__(self, x: Prompt, length: Optional[int], rng: RngStream) -> TokenSequence:
        return self.scheme.generate(
            self.model, self.key, x, length or self.model.generation_length, rng
        )


class WatermarkScheme(ABC):
    """Abstract watermarking scheme."""

    name: ClassVar[str]
    # attack steps used when an experiment leaves max_steps unset
    default_attack_steps: ClassVar[Optional[int]] = None

    def __init__(self, params: BaseModel):
        self.params = params

    def keygen(self, rng: RngStream) -> SecretKey:
        return rng.secret_key()

    def watermark(self, model: MarkovModel, rng: RngStream) -> tuple[SecretKey, WatermarkedSampler]:
        """
        Draw a fresh key and bind a watermarked sampler to it.

        Args:
            model: Generative model to watermark
            rng: Random stream for the key draw

        Returns:
            Tuple of (key, sampler)
        """
        key = self.keygen(rng)
        return key, WatermarkedSampler(self, model, key)

    @abstractmethod
    def generate(
        self,
        model: MarkovModel,
        key: SecretKey,
        x: Prompt,
        length: int,
        rng: RngStream,
    ) -> TokenSequence:
        """
        Produce one watermarked output.

        Args:
            model: Generative model
            key: Secret key
            x: Prompt
            length: Output length T
            rng: Random stream (ignored by deterministic samplers)

        Returns:
            Watermarked TokenSequence

        Raises:
            SchemeError: If the length or parameters are unsupported
            GenerationError: If the sampler cannot produce an output
        """
        pass

    @abstractmethod
    def detect(self, key: SecretKey, x: Prompt, y: TokenSequence) -> DetectionResult:
        pass

    def exact_false_positive_rate(self) -> Optional[float]:
        """False-positive rate known in closed form, or None when it must be estimated."""
        return None

    def z_score(self, result: DetectionResult) -> Optional[float]:
        """
        Detection evidence on the z scale, used by the known-detector stop rule.

        Schemes with a p-value report its normal quantile; threshold-only
        schemes have no z.
        """
        if result.p_value is None:
            return None
        return float(stats.norm.isf(result.p_value))
