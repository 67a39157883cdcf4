"""
Experiment configuration models.

An experiment is one YAML document. Every section forbids unknown keys and
cross-field constraints are checked at load time, so a misspelled or
inconsistent setting fails before any trial runs.
"""

from enum import Enum
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..attack.stop_rules import DEFAULT_Z_STOP, StopRuleKind
from ..core.quality import DEFAULT_TIE_BAND
from ..toy_models.markov import DEFAULT_LOG_FLOOR


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelKind(str, Enum):
    uniform = "uniform"
    dirichlet = "dirichlet"
    rows = "rows"
    file = "file"


class ModelSpec(_Section):
    """How to build a Markov model."""

    kind: ModelKind = ModelKind.uniform
    vocab_size: int = Field(3, ge=2)
    order: int = Field(1, ge=1)
    length: int = Field(4, ge=1, description="Generation length T")
    concentration: float = Field(1.0, gt=0.0, description="Dirichlet concentration (kind=dirichlet)")
    rows: Optional[list[list[float]]] = Field(None, description="Transition rows in context order (kind=rows)")
    initial: Optional[list[float]] = Field(None, description="Start-context law (kind=rows)")
    path: Optional[str] = Field(None, description="Matrix-format file (kind=file)")

    @model_validator(mode="after")
    def _kind_fields(self) -> "ModelSpec":
        if self.kind == ModelKind.rows:
            if self.rows is None:
                raise ValueError("rows is required when kind is 'rows'")
            expected = self.vocab_size**self.order
            if len(self.rows) != expected or any(len(row) != self.vocab_size for row in self.rows):
                raise ValueError(f"rows must be a {expected} x {self.vocab_size} table")
        if self.kind == ModelKind.file and not self.path:
            raise ValueError("path is required when kind is 'file'")
        return self


class PromptSpec(_Section):
    tokens: list[int] = Field(default_factory=list)
    identifier: str = "prompt"


class SchemeSpec(_Section):
    name: str = Field("kgw", description="kgw | unigram | exp | synthetic")
    params: dict[str, Any] = Field(default_factory=dict)

    @field_validator("name")
    @classmethod
    def _known(cls, value: str) -> str:
        if value not in {"kgw", "unigram", "exp", "synthetic"}:
            raise ValueError(f"unknown scheme '{value}'")
        return value


class QualitySpec(_Section):
    """Reference quality function."""

    reference: Optional[ModelSpec] = Field(None, description="Reference chain (default: the generator)")
    floor: float = Field(DEFAULT_LOG_FLOOR, lt=0.0)
    calibration_samples: int = Field(10_000, ge=1)
    slope: Optional[float] = Field(None, gt=0.0, description="Skip calibration when set with intercept")
    intercept: Optional[float] = None

    @model_validator(mode="after")
    def _both_or_neither(self) -> "QualitySpec":
        if (self.slope is None) != (self.intercept is None):
            raise ValueError("slope and intercept must be given together")
        return self


class PerturberSpec(_Section):
    span_length: int = Field(4, ge=1)
    top_p: float = Field(0.95, gt=0.0, le=1.0)
    proposal: Optional[ModelSpec] = Field(None, description="Proposal chain (default: the generator)")


class AttackMode(str, Enum):
    random_walk = "random_walk"
    extended = "extended"


class StopRuleSpec(_Section):
    kind: StopRuleKind = StopRuleKind.fixed_steps
    alpha: Optional[float] = Field(None, gt=0.0, le=1.0)
    alpha_reference_length: Optional[int] = Field(
        None, ge=1, description="Scale alpha to the output length when alpha is unset"
    )
    threshold: float = DEFAULT_Z_STOP

    @model_validator(mode="after")
    def _alpha_source(self) -> "StopRuleSpec":
        if (
            self.kind == StopRuleKind.replacement_fraction
            and self.alpha is None
            and self.alpha_reference_length is None
        ):
            raise ValueError("replacement_fraction needs alpha or alpha_reference_length")
        return self


class AttackSpec(_Section):
    mode: AttackMode = AttackMode.random_walk
    max_steps: Optional[int] = Field(None, ge=0, description="Default: scheme budget or mixing bound")
    t_err: Optional[int] = Field(None, ge=0)
    delta: float = Field(DEFAULT_TIE_BAND, ge=0.0)
    patience: int = Field(10, ge=1)
    backtracking: bool = False
    oblivious: bool = True
    stop_rule: StopRuleSpec = Field(default_factory=StopRuleSpec)
    min_input_quality: Optional[float] = Field(None, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _consistent(self) -> "AttackSpec":
        if self.max_steps is not None and self.t_err is not None and self.t_err > self.max_steps:
            raise ValueError(f"t_err ({self.t_err}) cannot exceed max_steps ({self.max_steps})")
        if self.stop_rule.kind == StopRuleKind.known_detector_z and self.oblivious:
            raise ValueError("stop_rule known_detector_z is not allowed when oblivious is true")
        return self


class TheorySpec(_Section):
    eps_dist: float = Field(0.01, gt=0.0, le=1.0)
    percentile: float = Field(50.0, ge=0.0, le=100.0)
    percentile_grid: list[float] = Field(default_factory=lambda: [0.0, 25.0, 50.0, 75.0, 100.0])
    percentile_samples: int = Field(1000, ge=100)
    max_grid_points: int = Field(100, ge=1, description="Cap on distinct-quality grid points")
    tail_target: float = Field(1e-3, gt=0.0, lt=1.0)
    preservation_calls: int = Field(2000, ge=1)
    false_positive_trials: int = Field(10_000, ge=100, description="For schemes without an exact rate")

    @field_validator("percentile_grid")
    @classmethod
    def _in_range(cls, value: list[float]) -> list[float]:
        if any(not 0.0 <= v <= 100.0 for v in value):
            raise ValueError("percentiles must be in [0, 100]")
        return value


class ExperimentConfig(_Section):
    """A complete experiment definition."""

    seed: int = Field(0, ge=0, lt=1 << 64)
    trials: int = Field(100, ge=1)
    output_dir: Optional[str] = None
    fixed_key: bool = False
    trace: bool = False
    prompt: PromptSpec = Field(default_factory=PromptSpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    scheme: SchemeSpec = Field(default_factory=SchemeSpec)
    quality: QualitySpec = Field(default_factory=QualitySpec)
    perturber: PerturberSpec = Field(default_factory=PerturberSpec)
    attack: AttackSpec = Field(default_factory=AttackSpec)
    theory: TheorySpec = Field(default_factory=TheorySpec)

    @model_validator(mode="after")
    def _cross_section(self) -> "ExperimentConfig":
        # a model file's vocabulary and length are only known once it is loaded
        if self.model.kind != ModelKind.file:
            problems = model_constraints(self, self.model.vocab_size, self.model.length)
            if problems:
                raise ValueError(problems[0])
        if self.scheme.name == "synthetic" and "target_fp_rate" not in self.scheme.params:
            raise ValueError("scheme.params.target_fp_rate: required for the synthetic scheme")
        return self


def model_constraints(config: ExperimentConfig, vocab_size: int, length: int) -> list[str]:
    """
    Cross-section constraints that depend on the generator's vocabulary and length.

    Returns:
        One message per violated constraint, each starting with the field path
    """
    problems = []
    if config.perturber.span_length > length:
        problems.append(
            f"perturber.span_length: {config.perturber.span_length} exceeds model length {length}"
        )
    if any(t >= vocab_size for t in config.prompt.tokens):
        problems.append(f"prompt.tokens: token outside vocabulary of size {vocab_size}")
    if config.scheme.name == "exp":
        n = config.scheme.params.get("key_sequence_length", 256)
        if n < length:
            problems.append(
                f"scheme.params.key_sequence_length: {n} is shorter than model length {length}"
            )
    for name in ("quality.reference", "perturber.proposal"):
        section, field = name.split(".")
        spec = getattr(getattr(config, section), field)
        if spec is not None and spec.kind != ModelKind.file and spec.vocab_size != vocab_size:
            problems.append(f"{name}.vocab_size: must match model vocabulary size {vocab_size}")
    return problems
