"""
Quality-preserving random-walk erasure attacks.

random_walk_attack is the practical attack: propose with the perturbation
oracle, keep the proposal unless it loses to the ORIGINAL output's quality,
optionally backtrack after a run of rejections, and stop early under a stop
rule. extended_attack is the counting adversary used to check the success
bound: it makes exactly T proposals, counts accepts, and aborts when fewer
than T - t_err were accepted.

Neither attack ever sees the scheme key. The only detector access is the
optional detector_z callable used by the known_detector_z stop rule.
"""

import logging
import math
from typing import Callable, Optional

from pydantic import BaseModel, Field, model_validator

from ..core.oracles import PerturbationOracle, QualityOracle
from ..core.quality import DEFAULT_TIE_BAND, compare_quality
from ..core.rng import RngStream
from ..errors import ConfigurationError, LabError, OracleError
from ..models.core import DetectionResult, Prompt, QualityScore, TokenSequence, Verdict
from ..models.records import AttackRun, TraceStep
from ..schemes.registry import default_attack_steps
from .stop_rules import AttackProgress, StopDecision, StopRule, StopRuleKind, apply_stop_rule

logger = logging.getLogger(__name__)


class AttackConfig(BaseModel):
    """Attack budget and mechanics. Carries no key material."""

    max_steps: int = Field(..., ge=0, description="Proposal budget T")
    t_err: int = Field(0, ge=0, description="Tolerated rejections before the extended attack aborts")
    delta: float = Field(DEFAULT_TIE_BAND, ge=0.0, description="Quality tie band")
    patience: int = Field(10, ge=1, description="Consecutive rejections before backtracking")
    backtracking: bool = Field(False, description="Revert to the predecessor after `patience` rejections")
    stop_rule: StopRule = Field(default_factory=StopRule)
    oblivious: bool = Field(True, description="Attacker has no detector access")
    record_trace: bool = False

    @model_validator(mode="after")
    def _consistent(self) -> "AttackConfig":
        if self.t_err > self.max_steps:
            raise ValueError(f"t_err ({self.t_err}) cannot exceed max_steps ({self.max_steps})")
        if self.stop_rule.kind == StopRuleKind.known_detector_z and self.oblivious:
            raise ValueError("known_detector_z stop rule is not allowed in oblivious mode")
        return self


def _score(quality: QualityOracle, x: Prompt, y: TokenSequence, step: int) -> QualityScore:
    try:
        return quality(x, y)
    except LabError:
        raise
    except Exception as e:
        raise OracleError(step, f"quality oracle failed: {e}") from e


def _propose(
    perturber: PerturbationOracle, x: Prompt, y: TokenSequence, rng: RngStream, step: int
) -> TokenSequence:
    try:
        proposal = perturber(x, y, rng)
    except LabError:
        raise
    except Exception as e:
        raise OracleError(step, f"perturbation oracle failed: {e}") from e
    if proposal.length != y.length:
        raise OracleError(step, f"perturbation changed length {y.length} -> {proposal.length}")
    return proposal


def random_walk_attack(
    x: Prompt,
    y: TokenSequence,
    quality: QualityOracle,
    perturber: PerturbationOracle,
    config: AttackConfig,
    rng: RngStream,
    detector_z: Optional[Callable[[TokenSequence], Optional[float]]] = None,
) -> AttackRun:
    """
    Run the random-walk attack.

    Args:
        x: Prompt
        y: Watermarked output to erase, non-empty
        quality: Quality oracle Q
        perturber: Perturbation oracle P
        config: Attack configuration
        rng: Random stream for the perturbation oracle
        detector_z: z score of a sequence, only for the known_detector_z stop rule

    Returns:
        AttackRun whose final output never loses to y's quality

    Raises:
        OracleError: If an oracle fails (carries the step index)
        ConfigurationError: If the stop rule cannot be evaluated
    """
    if y.length == 0:
        raise ValueError("cannot attack an empty sequence")
    q_ref = _score(quality, x, y, 0)
    current, q_current = y, q_ref
    # predecessors of the current position, for backtracking
    history: list[tuple[TokenSequence, QualityScore]] = []
    rejections = 0
    accepted = 0
    trace: list[TraceStep] = []
    stop_reason = None

    def should_stop(step: int) -> bool:
        progress = AttackProgress(step=step, initial=y, current=current)
        decision = apply_stop_rule(progress, config.stop_rule, detector_z, config.oblivious)
        return decision == StopDecision.stop

    steps_taken = 0
    if should_stop(0):
        stop_reason = config.stop_rule.kind.value
    else:
        for step in range(1, config.max_steps + 1):
            proposal = _propose(perturber, x, current, rng, step)
            q_new = _score(quality, x, proposal, step)
            verdict = compare_quality(q_new, q_ref, config.delta)
            steps_taken = step
            backtracked = False
            if verdict != Verdict.lose:
                history.append((current, q_current))
                current, q_current = proposal, q_new
                accepted += 1
                rejections = 0
            else:
                rejections += 1
                if config.backtracking and rejections >= config.patience and history:
                    current, q_current = history.pop()
                    rejections = 0
                    backtracked = True
            if config.record_trace:
                trace.append(
                    TraceStep(
                        step=step,
                        proposal=proposal,
                        verdict=verdict,
                        accepted=verdict != Verdict.lose,
                        current=current,
                        quality=q_new.value,
                        replacement_fraction=y.hamming(current) / y.length,
                        backtracked=backtracked,
                    )
                )
            if should_stop(step):
                stop_reason = config.stop_rule.kind.value
                break

    logger.debug(f"random walk: {accepted}/{steps_taken} accepted, stop={stop_reason}")
    return AttackRun(
        mode="random_walk",
        initial=y,
        final=current,
        max_steps=config.max_steps,
        t_err=config.t_err,
        accepted_steps=accepted,
        proposals_made=steps_taken,
        stopped_early=stop_reason is not None,
        stop_reason=stop_reason,
        quality_before=q_ref,
        quality_after=q_current,
        trace=trace,
    )


def extended_attack(
    x: Prompt,
    y: TokenSequence,
    quality: QualityOracle,
    perturber: PerturbationOracle,
    config: AttackConfig,
    rng: RngStream,
) -> AttackRun:
    """
    Counting adversary: exactly T proposals, abort if fewer than T - t_err accepted.

    Quality is queried once on y to fix q0; a proposal is accepted when it does
    not lose to q0. There is no backtracking and stop rules are not consulted.

    Returns:
        AttackRun with final = None and aborted = True on abort
    """
    if y.length == 0:
        raise ValueError("cannot attack an empty sequence")
    if config.stop_rule.kind != StopRuleKind.fixed_steps or config.backtracking:
        logger.debug("extended attack ignores stop rules and backtracking")
    q0 = _score(quality, x, y, 0)
    current, q_current = y, q0
    ctr = 0
    trace: list[TraceStep] = []
    for step in range(1, config.max_steps + 1):
        proposal = _propose(perturber, x, current, rng, step)
        q_new = _score(quality, x, proposal, step)
        verdict = compare_quality(q_new, q0, config.delta)
        if verdict != Verdict.lose:
            current, q_current = proposal, q_new
            ctr += 1
        if config.record_trace:
            trace.append(
                TraceStep(
                    step=step,
                    proposal=proposal,
                    verdict=verdict,
                    accepted=verdict != Verdict.lose,
                    current=current,
                    quality=q_new.value,
                    replacement_fraction=y.hamming(current) / y.length,
                )
            )

    aborted = ctr < config.max_steps - config.t_err
    return AttackRun(
        mode="extended",
        initial=y,
        final=None if aborted else current,
        max_steps=config.max_steps,
        t_err=config.t_err,
        accepted_steps=ctr,
        proposals_made=config.max_steps,
        aborted=aborted,
        quality_before=q0,
        quality_after=None if aborted else q_current,
        trace=trace,
    )


def erasure_succeeded(run: AttackRun, detection_after: Optional[DetectionResult], delta: float) -> bool:
    """Run produced an output that is not detected and does not lose on quality."""
    if run.aborted or run.final is None or detection_after is None or run.quality_after is None:
        return False
    if detection_after.decision != 0:
        return False
    return compare_quality(run.quality_after, run.quality_before, delta) != Verdict.lose


def resolve_attack_budget(
    max_steps: Optional[int],
    t_err: Optional[int],
    scheme_name: str,
    mixing_bound: Optional[float] = None,
) -> tuple[int, int]:
    """
    Fill in (T, t_err) left unset by an experiment.

    Explicit values win. With a mixing bound m and no explicit T, t_err is the
    smallest integer with t_err >= ceil((m + t_err) / 4) and T = m + t_err.
    Otherwise T falls back to the scheme's default budget and t_err to ceil(T / 4).

    Raises:
        ConfigurationError: If no budget can be determined
    """
    if max_steps is not None:
        return max_steps, t_err if t_err is not None else math.ceil(max_steps / 4)
    if mixing_bound is not None:
        m = math.ceil(mixing_bound)
        if t_err is None:
            t_err = 0
            while t_err < math.ceil((m + t_err) / 4):
                t_err += 1
        return m + t_err, t_err
    steps = default_attack_steps(scheme_name)
    if steps is None:
        raise ConfigurationError(
            f"scheme '{scheme_name}' has no default attack budget; set attack.max_steps"
        )
    return steps, t_err if t_err is not None else math.ceil(steps / 4)
