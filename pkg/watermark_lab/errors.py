"""
Exception hierarchy for Watermark Lab.

Every error raised on purpose by the library derives from LabError so that the
command-line entry point can map it onto a stable exit code.
"""

from typing import Optional


class LabError(Exception):
    """Base class for all library errors."""


class ConfigurationError(LabError):
    """Invalid or inconsistent configuration (exit code 2)."""


class EnumerationCapError(LabError):
    """A state space exceeds the configured enumeration cap."""

    def __init__(self, what: str, size: int, cap: int):
        self.size = size
        self.cap = cap
        super().__init__(f"{what}: {size} states exceeds enumeration cap {cap}")


class MarkovModelError(LabError):
    """Malformed Markov model (missing row, bad probabilities)."""


class SchemeError(LabError):
    """Watermarking scheme misuse (bad parameters, unsupported length)."""


class GenerationError(SchemeError):
    """A watermarked sampler could not produce an output."""


class OracleError(LabError):
    """Quality or perturbation oracle failure inside an attack."""

    def __init__(self, step: int, message: str):
        self.step = step
        super().__init__(f"step {step}: {message}")


class PreconditionError(LabError):
    """Input violates an operation's precondition (e.g. reducible chain)."""


class ConvergenceError(LabError):
    """Iterative method did not converge within its cap."""


class EmptyGraphError(LabError):
    """No outputs survive the quality floor."""


class HarnessError(LabError):
    """Failure inside an experiment stage."""

    def __init__(self, stage: str, message: str, cause: Optional[BaseException] = None):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {message}")
