"""
Experiment service - Main orchestration layer for lab commands.

Handles:
1. Building the laboratory (model, scheme, oracles) from a validated config
2. Fanning trials out to worker threads, one random stream per trial
3. Stage-scoped error handling
4. Writing records and tidy CSVs through a single RecordStore

Trials are gathered in trial order and written by one collector, so the worker
count never changes an artifact.
"""

import asyncio
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Awaitable, Callable, Iterator, Optional, Sequence, TypeVar, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from ..attack.preservation import measure_preservation
from ..attack.random_walk import AttackConfig, erasure_succeeded, extended_attack, random_walk_attack
from ..config import Settings
from ..errors import (
    ConfigurationError,
    EmptyGraphError,
    EnumerationCapError,
    GenerationError,
    HarnessError,
    LabError,
)
from ..models.core import DetectionResult, Prompt, SecretKey, TokenSequence
from ..models.experiment import AttackMode, ExperimentConfig
from ..models.records import RateEstimate, RunRecord, SpectralReport, TrialRecord
from ..schemes.base import WatermarkedSampler, WatermarkScheme
from ..stats.hypothesis import binomial_tail
from ..stats.rates import estimate_false_positive, rate_estimate
from ..theory.bounds import (
    MIN_PERCENTILE_SAMPLES,
    choose_t_err,
    simple_query_budget,
    simple_success_estimate,
    success_lower_bound,
    watermarked_outputs,
)
from ..theory.graph import build_quality_graph, output_qualities
from ..theory.spectral import analyze_chain
from ..toy_models.enumeration import enumerate_outputs
from ..toy_models.perturb import kernel_matrix
from .fixtures import Laboratory, build_attack_config, build_laboratory
from .record_store import RecordStore

logger = logging.getLogger(__name__)

T = TypeVar("T")

GENERATE_COLUMNS = ["trial", "statistic", "z", "p_value", "decision", "quality", "error"]
ATTACK_COLUMNS = [
    "trial",
    "z_before",
    "z_after",
    "p_before",
    "p_after",
    "quality_before",
    "quality_after",
    "ctr",
    "aborted",
    "steps",
    "decision_before",
    "decision_after",
    "success",
    "filtered",
    "error",
]
TRACE_COLUMNS = [
    "trial",
    "step",
    "z",
    "quality",
    "replacement_fraction",
    "accepted",
    "verdict",
    "backtracked",
]
THEORY_COLUMNS = [
    "q",
    "label",
    "n_vertices",
    "irreducible",
    "aperiodic",
    "g",
    "pi_min",
    "bound",
    "empirical_t",
    "empty",
    "note",
]
STEP_COLUMNS = ["trial", "step", "metric", "value", "run"]
STEP_MEAN_COLUMNS = ["metric", "step", "mean", "std", "count"]
HISTOGRAM_COLUMNS = ["run", "metric", "bin", "left", "right", "count"]
HISTOGRAM_BINS = 20

# nullable integer columns: failed or filtered trials leave gaps
GENERATE_DTYPES = {"decision": "Int64"}
ATTACK_DTYPES = {"decision_before": "Int64", "decision_after": "Int64"}

# errors that already say what is wrong and map to their own exit code
PASS_THROUGH = (ConfigurationError, EnumerationCapError, HarnessError)

PASS = "PASS"
FAIL = "FAIL"


class CommandResult(BaseModel):
    """What a command hands back to the CLI."""

    command: str
    record: RunRecord
    out_dir: str
    exit_code: int = 0
    message: str = ""


@contextmanager
def stage(name: str, timing: Optional[dict[str, float]] = None) -> Iterator[None]:
    """
    Run a block as a named stage.

    Configuration and cap errors pass through unchanged; every other failure
    is re-raised as HarnessError carrying the stage name.
    """
    started = time.perf_counter()
    try:
        yield
    except PASS_THROUGH:
        raise
    except LabError as e:
        logger.error(f"Stage '{name}' failed: {e}")
        raise HarnessError(name, str(e), e) from e
    except Exception as e:
        logger.error(f"Unexpected error in stage '{name}': {e}", exc_info=True)
        raise HarnessError(name, f"internal error: {e}", e) from e
    finally:
        if timing is not None:
            timing[name] = timing.get(name, 0.0) + time.perf_counter() - started


def detection_z(scheme: WatermarkScheme, result: Optional[DetectionResult]) -> Optional[float]:
    return scheme.z_score(result) if result is not None else None


def detector_z_for(
    scheme: WatermarkScheme, key: SecretKey, x: Prompt
) -> Callable[[TokenSequence], Optional[float]]:
    """Detector access for the known_detector_z stop rule; the key stays in the closure."""

    def z_of(y: TokenSequence) -> Optional[float]:
        return scheme.z_score(scheme.detect(key, x, y))

    return z_of


def _mean(frame: pd.DataFrame, column: str) -> Optional[float]:
    if frame.empty:
        return None
    value = pd.to_numeric(frame[column], errors="coerce").mean()
    return None if pd.isna(value) else float(value)


def quality_grid(
    qualities: np.ndarray,
    q_min: float,
    percentiles: dict[str, float],
    max_points: int,
) -> list[tuple[float, str]]:
    """
    Quality floors for a theory sweep, ascending.

    Distinct output qualities (thinned to max_points), the percentile grid,
    q_min, and one floor just above the best output so the sweep ends on an
    empty graph.
    """
    distinct = np.unique(qualities)
    if distinct.size > max_points:
        distinct = np.unique(np.quantile(distinct, np.linspace(0.0, 1.0, max_points), method="lower"))
    points: dict[float, str] = {float(q): "distinct" for q in distinct}
    for label, q in percentiles.items():
        points[float(q)] = label
    points[float(q_min)] = "q_min"
    points[float(np.nextafter(qualities.max(), np.inf))] = "above_max"
    return sorted(points.items())


def spectral_row(report: SpectralReport) -> dict[str, Any]:
    return {
        "q": report.q,
        "label": report.label,
        "n_vertices": report.n_vertices,
        "irreducible": report.irreducible,
        "aperiodic": report.aperiodic,
        "g": report.gap,
        "pi_min": report.pi_min,
        "bound": report.mixing_bound,
        "empirical_t": report.empirical_mixing,
        "empty": report.empty,
        "note": report.note,
    }


class ExperimentService:
    """Service for orchestrating generate / attack / theory / validate runs."""

    def __init__(self, settings: Settings):
        """
        Initialize experiment service.

        Args:
            settings: Process settings (caps, worker count)
        """
        self.settings = settings
        self._commands: dict[str, Callable[..., Awaitable[CommandResult]]] = {}
        self.register_command("generate", self.run_generate)
        self.register_command("attack", self.run_attack)
        self.register_command("theory", self.run_theory)
        self.register_command("validate", self.run_validate)

    def register_command(self, name: str, handler: Callable[..., Awaitable[CommandResult]]):
        """
        Register a command handler.

        Args:
            name: Command name as used on the command line
            handler: Coroutine taking (config, config_hash, store, timing)
        """
        self._commands[name] = handler

    @property
    def commands(self) -> list[str]:
        return sorted(self._commands)

    async def run(
        self,
        command: str,
        config: ExperimentConfig,
        config_hash: str,
        raw_config: bytes,
        out_dir: Union[str, Path],
    ) -> CommandResult:
        """
        Run one command end to end and persist its artifacts.

        Args:
            command: Registered command name
            config: Validated experiment config (overrides applied)
            config_hash: SHA-256 of the config bytes
            raw_config: The config bytes, stored next to the record
            out_dir: Output directory

        Returns:
            CommandResult with the record and the exit code

        Raises:
            ConfigurationError: If the command or config is unusable
            EnumerationCapError: If an exact construction exceeds its cap
            HarnessError: If a stage fails
        """
        if command not in self._commands:
            raise ConfigurationError(
                f"unknown command '{command}'; expected one of {', '.join(self.commands)}"
            )
        store = RecordStore(out_dir)
        timing: dict[str, float] = {}
        started = time.perf_counter()
        logger.info(f"Running {command} (seed {config.seed}, {config.trials} trials) into {store.out_dir}")

        result = await self._commands[command](config, config_hash, store, timing)

        timing["total"] = time.perf_counter() - started
        with stage("persist"):
            store.write_config(raw_config)
            store.write_record(result.record)
            store.write_timing(timing)
        logger.info(f"{command} finished in {timing['total']:.2f}s")
        return result

    async def _map_trials(self, work: Callable[[int], T], n: int) -> list[T]:
        """Run work(0..n-1) on the worker pool; results come back in index order."""
        loop = asyncio.get_event_loop()
        with ThreadPoolExecutor(max_workers=self.settings.workers) as pool:
            futures = [loop.run_in_executor(pool, work, i) for i in range(n)]
            return list(await asyncio.gather(*futures))

    @staticmethod
    def _trial_key(lab: Laboratory, i: int) -> SecretKey:
        if lab.config.fixed_key:
            return lab.root.child("key").secret_key()
        return lab.scheme.keygen(lab.root.child(f"trial/{i}").child("key"))

    def _generate_trial(self, lab: Laboratory, i: int) -> tuple[TrialRecord, SecretKey]:
        trial_rng = lab.root.child(f"trial/{i}")
        key = self._trial_key(lab, i)
        sampler = WatermarkedSampler(lab.scheme, lab.model, key)
        try:
            y = sampler(lab.prompt, None, trial_rng.child("generate"))
        except GenerationError as e:
            logger.warning(f"Trial {i}: generation failed: {e}")
            return TrialRecord(trial=i, prompt=lab.prompt.identifier, error=str(e)), key
        record = TrialRecord(
            trial=i,
            prompt=lab.prompt.identifier,
            output=y,
            quality=lab.quality(lab.prompt, y),
            detection=lab.scheme.detect(key, lab.prompt, y),
        )
        return record, key

    def _attack_trial(
        self,
        lab: Laboratory,
        attack_config: AttackConfig,
        i: int,
        mode: AttackMode,
        min_input_quality: Optional[float] = None,
    ) -> TrialRecord:
        record, key = self._generate_trial(lab, i)
        if record.error is not None:
            return record
        if min_input_quality is not None and record.quality.value < min_input_quality:
            return record.model_copy(update={"filtered": True})

        x, y = lab.prompt, record.output
        attack_rng = lab.root.child(f"trial/{i}").child("attack")
        if mode == AttackMode.extended:
            run = extended_attack(x, y, lab.quality, lab.perturber, attack_config, attack_rng)
        else:
            detector = None if attack_config.oblivious else detector_z_for(lab.scheme, key, x)
            run = random_walk_attack(x, y, lab.quality, lab.perturber, attack_config, attack_rng, detector)

        after = lab.scheme.detect(key, x, run.final) if run.final is not None else None
        # the z trace is filled in after the walk; the attacker never saw it
        trace = [
            step.model_copy(update={"z": lab.scheme.z_score(lab.scheme.detect(key, x, step.current))})
            for step in run.trace
        ]
        run = run.model_copy(
            update={"detection_before": record.detection, "detection_after": after, "trace": trace}
        )
        return record.model_copy(update={"attack": run})

    def _attack_row(self, lab: Laboratory, record: TrialRecord, delta: float) -> dict[str, Any]:
        run = record.attack
        before = record.detection
        after = run.detection_after if run else None
        return {
            "trial": record.trial,
            "z_before": detection_z(lab.scheme, before),
            "z_after": detection_z(lab.scheme, after),
            "p_before": before.p_value if before else None,
            "p_after": after.p_value if after else None,
            "quality_before": record.quality.value if record.quality else None,
            "quality_after": run.quality_after.value if run and run.quality_after else None,
            "ctr": run.accepted_steps if run else None,
            "aborted": run.aborted if run else None,
            "steps": run.proposals_made if run else None,
            "decision_before": before.decision if before else None,
            "decision_after": after.decision if after else None,
            "success": erasure_succeeded(run, after, delta) if run else None,
            "filtered": record.filtered,
            "error": record.error,
        }

    async def run_generate(
        self, config: ExperimentConfig, config_hash: str, store: RecordStore, timing: dict[str, float]
    ) -> CommandResult:
        """Watermarked samples plus detection statistics, one fresh key per trial."""
        with stage("setup", timing):
            lab = build_laboratory(config, self.settings)

        with stage("generate", timing):
            pairs = await self._map_trials(lambda i: self._generate_trial(lab, i), config.trials)
            records = [record for record, _ in pairs]

        with stage("report", timing):
            rows = [
                {
                    "trial": r.trial,
                    "statistic": r.detection.statistic if r.detection else None,
                    "z": detection_z(lab.scheme, r.detection),
                    "p_value": r.detection.p_value if r.detection else None,
                    "decision": r.detection.decision if r.detection else None,
                    "quality": r.quality.value if r.quality else None,
                    "error": r.error,
                }
                for r in records
            ]
            store.write_table(rows, "generate.csv", GENERATE_COLUMNS, GENERATE_DTYPES)
            frame = pd.DataFrame(rows, columns=GENERATE_COLUMNS)
            completed = [r for r in records if r.detection is not None]
            rates = {}
            if completed:
                rates["detected"] = rate_estimate(
                    sum(r.detection.decision for r in completed),
                    len(completed),
                    excluded=len(records) - len(completed),
                )
            summary = {
                "trials": len(records),
                "errors": len(records) - len(completed),
                "fixed_key": config.fixed_key,
                "mean_z": _mean(frame, "z"),
                "mean_quality": _mean(frame, "quality"),
            }

        record = RunRecord(
            command="generate",
            config_hash=config_hash,
            master_seed=config.seed,
            scheme=lab.scheme.name,
            trials=records,
            rates=rates,
            summary=summary,
        )
        detected = rates.get("detected")
        message = f"generate: {len(completed)} outputs, mean z {summary['mean_z']}"
        if detected is not None:
            message += f", detection rate {detected.point:.4f}"
        return CommandResult(command="generate", record=record, out_dir=str(store.out_dir), message=message)

    async def run_attack(
        self, config: ExperimentConfig, config_hash: str, store: RecordStore, timing: dict[str, float]
    ) -> CommandResult:
        """Generate, then attack each output; before/after detection and quality per trial."""
        with stage("setup", timing):
            lab = build_laboratory(config, self.settings)
            attack_config = build_attack_config(config, record_trace=config.trace, length=lab.length)
            spec = config.attack

        with stage("attack", timing):
            records = await self._map_trials(
                lambda i: self._attack_trial(lab, attack_config, i, spec.mode, spec.min_input_quality),
                config.trials,
            )

        with stage("report", timing):
            rows = [self._attack_row(lab, r, spec.delta) for r in records]
            store.write_table(rows, "attack.csv", ATTACK_COLUMNS, ATTACK_DTYPES)
            if config.trace:
                trace_rows = [
                    {
                        "trial": r.trial,
                        "step": s.step,
                        "z": s.z,
                        "quality": s.quality,
                        "replacement_fraction": s.replacement_fraction,
                        "accepted": s.accepted,
                        "verdict": s.verdict.value,
                        "backtracked": s.backtracked,
                    }
                    for r in records
                    if r.attack is not None
                    for s in r.attack.trace
                ]
                store.write_table(trace_rows, "trace.csv", TRACE_COLUMNS)

            frame = pd.DataFrame(rows, columns=ATTACK_COLUMNS)
            attacked = [r for r in records if r.attack is not None]
            rates: dict[str, RateEstimate] = {}
            if attacked:
                rates["success"] = rate_estimate(
                    sum(erasure_succeeded(r.attack, r.attack.detection_after, spec.delta) for r in attacked),
                    len(attacked),
                    excluded=len(records) - len(attacked),
                )
                rates["detected_before"] = rate_estimate(
                    sum(r.detection.decision for r in attacked), len(attacked)
                )
                finished = [r for r in attacked if r.attack.detection_after is not None]
                if finished:
                    rates["detected_after"] = rate_estimate(
                        sum(r.attack.detection_after.decision for r in finished), len(finished)
                    )

        if attacked:
            with stage("eps_pert", timing):
                rates["eps_pert"] = measure_preservation(
                    lab.perturber,
                    lab.quality,
                    lab.prompt,
                    [r.output for r in attacked],
                    delta=spec.delta,
                    rng=lab.root.child("preservation"),
                )

        summary = {
            "mode": spec.mode.value,
            "max_steps": attack_config.max_steps,
            "t_err": attack_config.t_err,
            "stop_rule": attack_config.stop_rule.kind.value,
            "oblivious": attack_config.oblivious,
            "trials": len(records),
            "attacked": len(attacked),
            "filtered": sum(r.filtered for r in records),
            "errors": sum(r.error is not None for r in records),
            "mean_z_before": _mean(frame, "z_before"),
            "mean_z_after": _mean(frame, "z_after"),
            "mean_quality_before": _mean(frame, "quality_before"),
            "mean_quality_after": _mean(frame, "quality_after"),
        }
        record = RunRecord(
            command="attack",
            config_hash=config_hash,
            master_seed=config.seed,
            scheme=lab.scheme.name,
            trials=records,
            rates=rates,
            summary=summary,
        )
        message = (
            f"attack: {len(attacked)} runs, mean z {summary['mean_z_before']} -> {summary['mean_z_after']}"
        )
        if "success" in rates:
            message += f", success rate {rates['success'].point:.4f}"
        return CommandResult(command="attack", record=record, out_dir=str(store.out_dir), message=message)

    def _enumerate(self, lab: Laboratory) -> tuple[list[TokenSequence], np.ndarray, np.ndarray]:
        cap = self.settings.enumeration_cap
        outputs = enumerate_outputs(lab.model.vocabulary, lab.length, cap)
        kernel = kernel_matrix(lab.perturber, lab.prompt, outputs, cap=cap)
        qualities = output_qualities(lab.quality, lab.prompt, outputs)
        return outputs, kernel, qualities

    def _analyze_floor(
        self,
        lab: Laboratory,
        outputs: list[TokenSequence],
        kernel: np.ndarray,
        qualities: np.ndarray,
        q: float,
        label: str,
    ) -> SpectralReport:
        eps_dist = lab.config.theory.eps_dist
        try:
            graph = build_quality_graph(
                kernel,
                lab.quality,
                lab.prompt,
                q,
                outputs,
                vertex_cap=self.settings.graph_vertex_cap,
                qualities=qualities,
            )
        except EmptyGraphError:
            return SpectralReport(q=q, label=label, n_vertices=0, empty=True, eps_dist=eps_dist, note="empty")
        report = analyze_chain(graph, q, eps_dist=eps_dist, eigen_cap=self.settings.eigen_cap)
        return report.model_copy(update={"label": label})

    async def run_theory(
        self, config: ExperimentConfig, config_hash: str, store: RecordStore, timing: dict[str, float]
    ) -> CommandResult:
        """Spectral diagnostics and mixing bounds over a sweep of quality floors."""
        theory = config.theory
        with stage("setup", timing):
            lab = build_laboratory(config, self.settings)

        with stage("enumerate", timing):
            outputs, kernel, qualities = self._enumerate(lab)

        with stage("percentiles", timing):
            scores, skipped_keys = self._watermarked_scores(lab)
            q_min_value = float(np.percentile(scores, theory.percentile))
            percentiles = {f"v={v:g}": float(np.percentile(scores, v)) for v in theory.percentile_grid}

        with stage("sweep", timing):
            points = quality_grid(qualities, q_min_value, percentiles, theory.max_grid_points)
            reports = await self._map_trials(
                lambda i: self._analyze_floor(lab, outputs, kernel, qualities, *points[i]), len(points)
            )

        with stage("report", timing):
            rows = [spectral_row(r) for r in reports]
            store.write_table(rows, "theory.csv", THEORY_COLUMNS)
            ratios = [
                r.empirical_mixing / r.mixing_bound
                for r in reports
                if r.empirical_mixing is not None and r.mixing_bound
            ]
            summary = {
                "outputs": len(outputs),
                "max_quality": float(qualities.max()),
                "q_min": q_min_value,
                "v": theory.percentile,
                "percentiles": percentiles,
                "skipped_keys": skipped_keys,
                "eps_dist": theory.eps_dist,
                "grid_points": len(points),
                "max_empirical_over_bound": max(ratios) if ratios else None,
            }

        record = RunRecord(
            command="theory",
            config_hash=config_hash,
            master_seed=config.seed,
            scheme=lab.scheme.name,
            spectral=reports,
            summary=summary,
        )
        message = f"theory: {len(points)} quality floors over {len(outputs)} outputs, q_min {q_min_value:.6f}"
        return CommandResult(command="theory", record=record, out_dir=str(store.out_dir), message=message)

    def _false_positive_rate(self, lab: Laboratory) -> float:
        exact = lab.scheme.exact_false_positive_rate()
        if exact is not None:
            return exact
        estimate = estimate_false_positive(
            lab.scheme,
            lab.model,
            lab.prompt,
            lab.config.theory.false_positive_trials,
            lab.root.child("false_positive"),
        )
        return estimate.point

    def _watermarked_scores(self, lab: Laboratory) -> tuple[np.ndarray, int]:
        """Qualities of fresh-key watermarked outputs for q_min, and the number of keys skipped."""
        samples = lab.config.theory.percentile_samples
        if samples < MIN_PERCENTILE_SAMPLES:
            raise ValueError(f"quality percentiles need at least {MIN_PERCENTILE_SAMPLES} samples")
        outputs, skipped = watermarked_outputs(
            lab.scheme, lab.model, lab.prompt, samples, lab.root.child("percentile")
        )
        return np.array([lab.quality(lab.prompt, y).value for y in outputs]), skipped

    def _preservation_inputs(self, lab: Laboratory, n: int) -> tuple[list[TokenSequence], int]:
        return watermarked_outputs(lab.scheme, lab.model, lab.prompt, n, lab.root.child("preservation"))

    async def run_validate(
        self, config: ExperimentConfig, config_hash: str, store: RecordStore, timing: dict[str, float]
    ) -> CommandResult:
        """
        Check the attack-success guarantee end to end.

        Stages: false-positive rate, q_min, graph preconditions for every floor
        at or above q_min, eps_pert, attack budget (t_mix + t_err), extended-attack
        trials, verdict. A reducible or periodic graph is reported as a
        precondition failure, never as a bound failure.
        """
        theory = config.theory
        spec = config.attack
        with stage("setup", timing):
            lab = build_laboratory(config, self.settings)

        with stage("eps_pos", timing):
            eps_pos = self._false_positive_rate(lab)

        with stage("q_min", timing):
            scores, skipped_keys = self._watermarked_scores(lab)
            q_min_value = float(np.percentile(scores, theory.percentile))

        with stage("preconditions", timing):
            outputs, kernel, qualities = self._enumerate(lab)
            floors = np.unique(qualities[qualities >= q_min_value])
            reports = await self._map_trials(
                lambda i: self._analyze_floor(lab, outputs, kernel, qualities, float(floors[i]), "floor"),
                len(floors),
            )
            failed = [r for r in reports if r.empty or not (r.irreducible and r.aperiodic)]

        summary: dict[str, Any] = {
            "eps_pos": eps_pos,
            "v": theory.percentile,
            "q_min": q_min_value,
            "skipped_keys": skipped_keys,
            "floors": len(reports),
        }
        if failed:
            first = failed[0]
            summary.update(
                verdict=FAIL,
                reason="precondition",
                failed_floors=[r.q for r in failed],
                detail=f"graph at q={first.q:.6f} is {first.note}",
            )
            record = RunRecord(
                command="validate",
                config_hash=config_hash,
                master_seed=config.seed,
                scheme=lab.scheme.name,
                spectral=reports,
                summary=summary,
            )
            message = (
                f"FAIL (precondition): {len(failed)} of {len(reports)} quality graphs above q_min "
                f"{q_min_value:.6f} are not irreducible and aperiodic; first at q={first.q:.6f} ({first.note})"
            )
            return CommandResult(
                command="validate", record=record, out_dir=str(store.out_dir), exit_code=1, message=message
            )

        with stage("eps_pert", timing):
            inputs, preservation_skipped = self._preservation_inputs(lab, theory.preservation_calls)
            eps_pert = measure_preservation(
                lab.perturber,
                lab.quality,
                lab.prompt,
                inputs,
                delta=spec.delta,
                rng=lab.root.child("preservation").child("calls"),
            )

        with stage("budget", timing):
            t_mix_bound = max(r.mixing_steps for r in reports)
            t_mix_empirical = max((r.empirical_mixing or 0) for r in reports)
            # t_mix must cover the measured distance, not only the spectral bound
            t_mix = max(t_mix_bound, t_mix_empirical)
            t_mix_source = "empirical" if t_mix_empirical > t_mix_bound else "bound"
            if spec.max_steps is not None:
                max_steps = spec.max_steps
                t_err = spec.t_err if spec.t_err is not None else math.ceil(max_steps / 4)
            else:
                t_err = spec.t_err
                if t_err is None:
                    t_err = choose_t_err(t_mix, eps_pert.point, theory.tail_target)
                max_steps = t_mix + t_err
            attack_config = AttackConfig(max_steps=max_steps, t_err=t_err, delta=spec.delta)
            bound = success_lower_bound(
                theory.percentile, eps_pos, theory.eps_dist, eps_pert.point, max_steps, t_err
            )
            logger.info(
                f"Validation budget: t_mix={t_mix} ({t_mix_source}), t_err={t_err}, T={max_steps}, "
                f"eps_pert={eps_pert.point:.4f}, bound={bound:.4f}"
            )

        with stage("trials", timing):
            records = await self._map_trials(
                lambda i: self._attack_trial(lab, attack_config, i, AttackMode.extended), config.trials
            )

        with stage("verdict", timing):
            rows = [self._attack_row(lab, r, spec.delta) for r in records]
            store.write_table(rows, "validate.csv", ATTACK_COLUMNS, ATTACK_DTYPES)
            store.write_table([spectral_row(r) for r in reports], "theory.csv", THEORY_COLUMNS)
            attacked = [r for r in records if r.attack is not None]
            if not attacked:
                raise GenerationError("every trial failed to generate a watermarked output")
            successes = sum(
                erasure_succeeded(r.attack, r.attack.detection_after, spec.delta) for r in attacked
            )
            success = rate_estimate(successes, len(attacked), excluded=len(records) - len(attacked))
            aborts = rate_estimate(sum(r.attack.aborted for r in attacked), len(attacked))
            passed = success.point >= bound - success.half_width
            margin = success.point - bound

        summary.update(
            verdict=PASS if passed else FAIL,
            reason="bound",
            eps_pert=eps_pert.point,
            preservation_skipped_keys=preservation_skipped,
            eps_dist=theory.eps_dist,
            t_mix=t_mix,
            t_mix_bound=t_mix_bound,
            t_mix_empirical=t_mix_empirical,
            t_mix_source=t_mix_source,
            t_err=t_err,
            max_steps=max_steps,
            tail=binomial_tail(max_steps, t_err, eps_pert.point),
            bound=bound,
            success=success.point,
            half_width=success.half_width,
            margin=margin,
            simple_estimate=simple_success_estimate(eps_pos),
            simple_query_budget=simple_query_budget(t_mix, eps_pert.point) if eps_pert.point > 0 else None,
        )
        record = RunRecord(
            command="validate",
            config_hash=config_hash,
            master_seed=config.seed,
            scheme=lab.scheme.name,
            trials=records,
            rates={"success": success, "eps_pert": eps_pert, "aborted": aborts},
            spectral=reports,
            summary=summary,
        )
        message = (
            f"{summary['verdict']}: success {success.point:.4f} (95% CI half-width {success.half_width:.4f}) "
            f"vs bound {bound:.4f}, margin {margin:+.4f} "
            f"[eps_pos={eps_pos:.4f}, eps_pert={eps_pert.point:.4f}, T={max_steps}, t_err={t_err}]"
        )
        return CommandResult(
            command="validate",
            record=record,
            out_dir=str(store.out_dir),
            exit_code=0 if passed else 1,
            message=message,
        )

    def plot_data(self, records: Sequence[RunRecord], out_dir: Union[str, Path]) -> dict[str, Path]:
        """
        Tidy CSVs for z-vs-steps, quality-vs-steps and before/after histograms.

        Args:
            records: Attack RunRecords recorded with --trace
            out_dir: Output directory

        Returns:
            Mapping of table name to written path

        Raises:
            HarnessError: If a record carries no attack traces
        """
        store = RecordStore(out_dir)
        with stage("plotdata"):
            step_rows = []
            histogram_rows = []
            for r, record in enumerate(records):
                traced = [t for t in record.trials if t.attack is not None and t.attack.trace]
                if not traced:
                    raise HarnessError(
                        "plotdata",
                        f"record {r} ({record.command}, config {record.config_hash[:12]}) has no attack traces; "
                        "rerun attack with --trace",
                    )
                for trial in traced:
                    for s in trial.attack.trace:
                        for metric, value in (("z", s.z), ("quality", s.quality)):
                            step_rows.append(
                                {"trial": trial.trial, "step": s.step, "metric": metric, "value": value, "run": r}
                            )
                histogram_rows.extend(self._histograms(r, record))

            steps = pd.DataFrame(step_rows, columns=STEP_COLUMNS)
            steps["value"] = pd.to_numeric(steps["value"], errors="coerce")
            if steps.empty:
                means = pd.DataFrame(columns=STEP_MEAN_COLUMNS)
            else:
                means = (
                    steps.groupby(["metric", "step"], sort=True)["value"]
                    .agg(["mean", "std", "count"])
                    .reset_index()
                )
            paths = {
                "steps": store.write_frame(steps, "steps.csv"),
                "step_means": store.write_frame(means, "step_means.csv"),
                "histograms": store.write_table(histogram_rows, "histograms.csv", HISTOGRAM_COLUMNS),
            }
        return paths

    @staticmethod
    def _histograms(run: int, record: RunRecord) -> list[dict[str, Any]]:
        series: dict[str, list[float]] = {
            "statistic_before": [],
            "statistic_after": [],
            "quality_before": [],
            "quality_after": [],
        }
        for trial in record.trials:
            attack = trial.attack
            if attack is None:
                continue
            if attack.detection_before is not None:
                series["statistic_before"].append(attack.detection_before.statistic)
            if attack.detection_after is not None:
                series["statistic_after"].append(attack.detection_after.statistic)
            series["quality_before"].append(attack.quality_before.value)
            if attack.quality_after is not None:
                series["quality_after"].append(attack.quality_after.value)

        rows = []
        for metric, values in series.items():
            if not values:
                continue
            counts, edges = np.histogram(np.asarray(values), bins=HISTOGRAM_BINS)
            for b, count in enumerate(counts):
                rows.append(
                    {
                        "run": run,
                        "metric": metric,
                        "bin": b,
                        "left": float(edges[b]),
                        "right": float(edges[b + 1]),
                        "count": int(count),
                    }
                )
        return rows
