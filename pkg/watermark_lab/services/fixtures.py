"""
Builders turning an ExperimentConfig into live objects.

Every random construction draws from a labeled child of the experiment's root
stream, so the same config and seed always rebuild the same model, quality
calibration and scheme.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from pydantic import ValidationError

from ..attack.random_walk import AttackConfig, resolve_attack_budget
from ..attack.stop_rules import StopRule, StopRuleKind, length_scaled_alpha
from ..config import Settings
from ..core.rng import RngStream
from ..errors import ConfigurationError
from ..models.core import Prompt, Vocabulary
from ..models.experiment import ExperimentConfig, ModelKind, ModelSpec, model_constraints
from ..schemes.base import WatermarkScheme
from ..schemes.registry import build_scheme
from ..toy_models.markov import MarkovModel
from ..toy_models.matrix_format import load_markov_model
from ..toy_models.perturb import SpanPerturber
from ..toy_models.quality import ReferenceQuality, calibrate_quality

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Laboratory:
    """Everything one experiment needs, built once and shared read-only by all trials."""

    config: ExperimentConfig
    settings: Settings
    root: RngStream
    prompt: Prompt
    model: MarkovModel
    scheme: WatermarkScheme
    quality: ReferenceQuality
    perturber: SpanPerturber

    @property
    def length(self) -> int:
        return self.model.generation_length


def build_model(spec: ModelSpec, rng: RngStream) -> MarkovModel:
    """
    Build a Markov model from its spec.

    Raises:
        MarkovModelError: If a model file is malformed
        ConfigurationError: If inline rows do not form a valid chain
    """
    if spec.kind == ModelKind.uniform:
        return MarkovModel.uniform(spec.vocab_size, spec.order, spec.length)
    if spec.kind == ModelKind.dirichlet:
        return MarkovModel.random_dirichlet(
            spec.vocab_size, spec.order, spec.length, spec.concentration, rng
        )
    if spec.kind == ModelKind.file:
        return load_markov_model(spec.path)
    n = spec.vocab_size**spec.order
    try:
        return MarkovModel(
            vocabulary=Vocabulary(size=spec.vocab_size),
            order=spec.order,
            transition_table=np.array(spec.rows, dtype=np.float64),
            initial_distribution=spec.initial if spec.initial is not None else np.full(n, 1.0 / n),
            generation_length=spec.length,
        )
    except ValidationError as e:
        raise ConfigurationError(f"model rows do not form a valid chain: {e}") from e


def build_companion_model(
    name: str, spec: ModelSpec, generator: MarkovModel, rng: RngStream
) -> MarkovModel:
    """Build a reference or proposal model, which must share the generator's vocabulary."""
    model = build_model(spec, rng)
    if model.vocabulary.size != generator.vocabulary.size:
        raise ConfigurationError(
            f"{name}: vocabulary size {model.vocabulary.size} does not match "
            f"the generator's {generator.vocabulary.size}"
        )
    return model


def build_quality(
    config: ExperimentConfig, generator: MarkovModel, prompt: Prompt, rng: RngStream
) -> ReferenceQuality:
    spec = config.quality
    reference = (
        build_companion_model("quality.reference", spec.reference, generator, rng.child("model"))
        if spec.reference
        else generator
    )
    if spec.slope is not None:
        return ReferenceQuality(
            reference_model=reference, floor=spec.floor, slope=spec.slope, intercept=spec.intercept
        )
    return calibrate_quality(
        reference,
        prompt,
        rng.child("calibration"),
        length=generator.generation_length,
        samples=spec.calibration_samples,
        floor=spec.floor,
    )


def build_perturber(config: ExperimentConfig, generator: MarkovModel, rng: RngStream) -> SpanPerturber:
    spec = config.perturber
    proposal = (
        build_companion_model("perturber.proposal", spec.proposal, generator, rng.child("model"))
        if spec.proposal
        else generator
    )
    return SpanPerturber(proposal_model=proposal, span_length=spec.span_length, top_p=spec.top_p)


def check_loaded_model(config: ExperimentConfig, model: MarkovModel) -> None:
    """
    Check the config against a model loaded from file.

    Raises:
        ConfigurationError: Listing every constraint the loaded model violates
    """
    problems = model_constraints(config, model.vocabulary.size, model.generation_length)
    if problems:
        raise ConfigurationError(f"{config.model.path}: " + "; ".join(problems))


def build_laboratory(config: ExperimentConfig, settings: Settings) -> Laboratory:
    """Build model, scheme, quality oracle and perturber for an experiment."""
    root = RngStream(config.seed, "experiment")
    prompt = Prompt(tokens=tuple(config.prompt.tokens), identifier=config.prompt.identifier)
    model = build_model(config.model, root.child("model"))
    if config.model.kind == ModelKind.file:
        check_loaded_model(config, model)
    scheme = build_scheme(config.scheme.name, config.scheme.params, vocab_size=model.vocabulary.size)
    quality = build_quality(config, model, prompt, root.child("quality"))
    perturber = build_perturber(config, model, root.child("perturber"))
    logger.info(
        f"Built laboratory: scheme={scheme.name}, vocab={model.vocabulary.size}, "
        f"order={model.order}, length={model.generation_length}, span={perturber.span_length}"
    )
    return Laboratory(
        config=config,
        settings=settings,
        root=root,
        prompt=prompt,
        model=model,
        scheme=scheme,
        quality=quality,
        perturber=perturber,
    )


def build_stop_rule(config: ExperimentConfig, length: Optional[int] = None) -> StopRule:
    spec = config.attack.stop_rule
    length = length or config.model.length
    alpha = spec.alpha
    if spec.kind == StopRuleKind.replacement_fraction and alpha is None:
        alpha = length_scaled_alpha(length, base_length=spec.alpha_reference_length)
    return StopRule(kind=spec.kind, alpha=alpha, threshold=spec.threshold)


def build_attack_config(
    config: ExperimentConfig,
    mixing_bound: Optional[float] = None,
    record_trace: bool = False,
    length: Optional[int] = None,
) -> AttackConfig:
    """Resolve the attack budget and mechanics for this experiment."""
    spec = config.attack
    max_steps, t_err = resolve_attack_budget(spec.max_steps, spec.t_err, config.scheme.name, mixing_bound)
    try:
        return AttackConfig(
            max_steps=max_steps,
            t_err=t_err,
            delta=spec.delta,
            patience=spec.patience,
            backtracking=spec.backtracking,
            stop_rule=build_stop_rule(config, length),
            oblivious=spec.oblivious,
            record_trace=record_trace,
        )
    except ValidationError as e:
        raise ConfigurationError(f"attack: {e}") from e
