"""
Stopping conditions for the practical random-walk attack.
"""

from enum import Enum
from typing import Callable, Optional

from pydantic import BaseModel, Field, model_validator

from ..errors import ConfigurationError
from ..models.core import TokenSequence

DEFAULT_Z_STOP = 1.645


class StopRuleKind(str, Enum):
    fixed_steps = "fixed_steps"
    replacement_fraction = "replacement_fraction"
    known_detector_z = "known_detector_z"


class StopDecision(str, Enum):
    proceed = "continue"
    stop = "stop"


class StopRule(BaseModel):
    """When to end an attack before max_steps."""

    kind: StopRuleKind = StopRuleKind.fixed_steps
    alpha: Optional[float] = Field(None, gt=0.0, le=1.0, description="Replacement fraction to stop at")
    threshold: float = Field(DEFAULT_Z_STOP, description="Stop once the detector z drops below this")

    @model_validator(mode="after")
    def _alpha_present(self) -> "StopRule":
        if self.kind == StopRuleKind.replacement_fraction and self.alpha is None:
            raise ValueError("replacement_fraction rule needs alpha in (0, 1]")
        return self


class AttackProgress(BaseModel):
    """Snapshot of an attack in flight, as seen by a stop rule."""

    step: int = Field(..., ge=0)
    initial: TokenSequence
    current: TokenSequence

    @property
    def replacement_fraction(self) -> float:
        return self.initial.hamming(self.current) / self.initial.length


def length_scaled_alpha(length: int, base_alpha: float = 0.7, base_length: int = 500) -> float:
    """Replacement fraction scaled to the output length: min(1, base_alpha * length / base_length)."""
    if length < 1 or base_length < 1:
        raise ValueError("lengths must be positive")
    return min(1.0, base_alpha * length / base_length)


def check_stop_rule(rule: StopRule, oblivious: bool) -> None:
    """
    Raises:
        ConfigurationError: If the rule needs detector access in oblivious mode
    """
    if rule.kind == StopRuleKind.known_detector_z and oblivious:
        raise ConfigurationError(
            "known_detector_z stop rule needs detector access and is not allowed for an oblivious attacker"
        )


def apply_stop_rule(
    progress: AttackProgress,
    rule: StopRule,
    detector_z: Optional[Callable[[TokenSequence], Optional[float]]] = None,
    oblivious: bool = False,
) -> StopDecision:
    """
    Decide whether the attack should stop at this point.

    Args:
        progress: Current walk position and step
        rule: Stop rule
        detector_z: z score of a sequence under the target detector
            (known_detector_z only)
        oblivious: Whether the attacker is barred from detector access

    Returns:
        StopDecision.stop or StopDecision.proceed

    Raises:
        ConfigurationError: If the rule cannot be evaluated in this mode
    """
    if rule.kind == StopRuleKind.fixed_steps:
        return StopDecision.proceed

    if rule.kind == StopRuleKind.replacement_fraction:
        if progress.replacement_fraction >= rule.alpha:
            return StopDecision.stop
        return StopDecision.proceed

    check_stop_rule(rule, oblivious)
    if detector_z is None:
        raise ConfigurationError("known_detector_z stop rule needs a detector")
    z = detector_z(progress.current)
    if z is None:
        raise ConfigurationError("detector does not report a z score")
    return StopDecision.stop if z < rule.threshold else StopDecision.proceed
