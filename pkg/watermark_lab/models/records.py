"""
Pydantic models for experiment outputs.

Everything the harness writes to disk is one of these models, serialized with
model_dump(mode="json").
"""

from typing import Any, Optional

from pydantic import BaseModel, Field, model_validator

from .core import DetectionResult, QualityScore, TokenSequence, Verdict


class RateEstimate(BaseModel):
    """Empirical rate with an exact (Clopper-Pearson) 95% interval."""

    point: float = Field(..., ge=0.0, le=1.0)
    ci_low: float = Field(..., ge=0.0, le=1.0)
    ci_high: float = Field(..., ge=0.0, le=1.0)
    trials: int = Field(..., ge=1)
    excluded: int = Field(0, ge=0, description="Trials left out of the rate (e.g. generation errors)")
    method: str = "clopper-pearson"

    @model_validator(mode="after")
    def _ordered(self) -> "RateEstimate":
        if not self.ci_low <= self.point <= self.ci_high:
            raise ValueError(f"interval [{self.ci_low}, {self.ci_high}] does not contain {self.point}")
        return self

    @property
    def half_width(self) -> float:
        return (self.ci_high - self.ci_low) / 2


class TraceStep(BaseModel):
    """One proposal of an attack run."""

    step: int = Field(..., ge=1)
    proposal: TokenSequence
    verdict: Verdict
    accepted: bool
    current: TokenSequence = Field(..., description="Walk position after this step")
    quality: float = Field(..., description="Quality of the proposal")
    replacement_fraction: float = Field(..., ge=0.0, le=1.0)
    backtracked: bool = False
    z: Optional[float] = Field(None, description="Detector z of `current`, filled by the harness")


class AttackRun(BaseModel):
    """Accounting for one random-walk or extended attack."""

    mode: str = Field(..., description="random_walk or extended")
    initial: TokenSequence
    final: Optional[TokenSequence] = Field(None, description="None when the extended attack aborts")
    max_steps: int = Field(..., ge=0)
    t_err: int = Field(0, ge=0)
    accepted_steps: int = Field(0, ge=0, description="ctr")
    proposals_made: int = Field(0, ge=0)
    aborted: bool = False
    stopped_early: bool = False
    stop_reason: Optional[str] = None
    quality_before: QualityScore
    quality_after: Optional[QualityScore] = None
    detection_before: Optional[DetectionResult] = None
    detection_after: Optional[DetectionResult] = None
    trace: list[TraceStep] = Field(default_factory=list)

    @model_validator(mode="after")
    def _accounting(self) -> "AttackRun":
        if self.accepted_steps > self.proposals_made:
            raise ValueError("accepted_steps cannot exceed proposals_made")
        if self.aborted and self.accepted_steps >= self.max_steps - self.t_err:
            raise ValueError("an aborted run must have ctr < T - t_err")
        if self.aborted and self.final is not None:
            raise ValueError("an aborted run has no output")
        return self


class SpectralReport(BaseModel):
    """Markov-chain diagnostics of one quality-floor graph."""

    q: float
    label: Optional[str] = Field(None, description="Where q comes from in a sweep (q_min, v=50, ...)")
    n_vertices: int = Field(..., ge=0)
    empty: bool = False
    irreducible: Optional[bool] = None
    aperiodic: Optional[bool] = None
    stationary: list[float] = Field(default_factory=list)
    gap: Optional[float] = Field(None, ge=0.0, lt=1.0)
    pi_min: Optional[float] = None
    eps_dist: float = 0.01
    mixing_bound: Optional[float] = None
    mixing_steps: Optional[int] = Field(None, description="ceil(mixing_bound)")
    empirical_mixing: Optional[int] = None
    note: Optional[str] = None

    @model_validator(mode="after")
    def _probability_vector(self) -> "SpectralReport":
        if self.stationary and abs(sum(self.stationary) - 1.0) > 1e-9:
            raise ValueError("stationary distribution must sum to 1 within 1e-9")
        return self


class TrialRecord(BaseModel):
    """Generation (and optional attack) outcome of one trial."""

    trial: int = Field(..., ge=0)
    prompt: str
    output: Optional[TokenSequence] = None
    quality: Optional[QualityScore] = None
    detection: Optional[DetectionResult] = None
    attack: Optional[AttackRun] = None
    filtered: bool = Field(False, description="Input below min_input_quality; not attacked")
    error: Optional[str] = None


class RunRecord(BaseModel):
    """Top-level artifact of one CLI command."""

    command: str
    config_hash: str = Field(..., description="SHA-256 of the config bytes")
    master_seed: int
    scheme: Optional[str] = None
    trials: list[TrialRecord] = Field(default_factory=list)
    rates: dict[str, RateEstimate] = Field(default_factory=dict)
    spectral: list[SpectralReport] = Field(default_factory=list)
    summary: dict[str, Any] = Field(default_factory=dict)
