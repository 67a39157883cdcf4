import math
from pathlib import Path

import pandas as pd
import pytest
import yaml

from watermark_lab.cli import main
from watermark_lab.config import (
    Settings,
    apply_overrides,
    config_hash,
    inline_config,
    load_experiment_config,
)
from watermark_lab.errors import (
    ConfigurationError,
    EnumerationCapError,
    HarnessError,
    SchemeError,
)
from watermark_lab.models.core import QualityScore, TokenSequence, Verdict
from watermark_lab.models.records import AttackRun, RunRecord, TraceStep, TrialRecord
from watermark_lab.services.experiment_service import (
    ATTACK_COLUMNS,
    ATTACK_DTYPES,
    GENERATE_COLUMNS,
    GENERATE_DTYPES,
    STEP_COLUMNS,
    ExperimentService,
    quality_grid,
    stage,
)
from watermark_lab.services.record_store import RecordStore
from watermark_lab.toy_models.markov import MarkovModel
from watermark_lab.toy_models.matrix_format import dump_markov_model

CONFIGS = Path(__file__).parent.parent / "configs"

REFERENCE = {
    "kind": "rows",
    "vocab_size": 3,
    "rows": [[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.3, 0.2, 0.5]],
}


def small(**sections):
    base = {
        "seed": 11,
        "trials": 6,
        "model": {"kind": "uniform", "vocab_size": 5, "length": 8},
        "scheme": {"name": "kgw", "params": {"delta": 2.0}},
        "quality": {"slope": 0.05, "intercept": 0.9},
        "perturber": {"span_length": 2, "top_p": 1.0},
    }
    base.update(sections)
    return base


def enumerable(length=4, **sections):
    """Vocab-3 experiment small enough for the exact theory constructions."""
    return small(
        model={"kind": "uniform", "vocab_size": 3, "length": length},
        quality={"reference": {**REFERENCE, "length": length}, "slope": 0.1, "intercept": 0.9},
        perturber={"span_length": length, "top_p": 1.0},
        **sections,
    )


async def run(command, out_dir, data, workers=1):
    config, digest, raw = inline_config(data)
    service = ExperimentService(Settings(workers=workers))
    return await service.run(command, config, digest, raw, out_dir)


def traced_record(z_values, quality=0.5):
    y = TokenSequence(tokens=(0, 1))
    trace = [
        TraceStep(
            step=i + 1,
            proposal=y,
            verdict=Verdict.tie,
            accepted=True,
            current=y,
            quality=quality,
            replacement_fraction=0.0,
            z=z,
        )
        for i, z in enumerate(z_values)
    ]
    attack = AttackRun(
        mode="random_walk",
        initial=y,
        final=y,
        max_steps=len(z_values),
        quality_before=QualityScore(value=quality),
        quality_after=QualityScore(value=quality),
        trace=trace,
    )
    return RunRecord(
        command="attack",
        config_hash="0" * 64,
        master_seed=0,
        trials=[TrialRecord(trial=0, prompt="p", attack=attack)],
    )


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigurationError) as info:
        inline_config({"bogus": 1})
    assert "bogus" in str(info.value)
    with pytest.raises(ConfigurationError) as info:
        inline_config({"model": {"length": 2}, "perturber": {"span_length": 4}})
    assert "perturber.span_length" in str(info.value)
    with pytest.raises(ConfigurationError):
        inline_config({"scheme": {"name": "synthetic"}})
    with pytest.raises(ConfigurationError):
        inline_config({"attack": {"stop_rule": {"kind": "known_detector_z"}}})


def test_load_config_file(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(small()))
    config, digest, raw = load_experiment_config(path)
    assert config.trials == 6
    assert digest == config_hash(path.read_bytes())
    assert raw == path.read_bytes()

    with pytest.raises(ConfigurationError):
        load_experiment_config(tmp_path / "missing.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigurationError):
        load_experiment_config(tmp_path / "list.yaml")
    (tmp_path / "broken.yaml").write_text("seed: [1, 2\n")
    with pytest.raises(ConfigurationError):
        load_experiment_config(tmp_path / "broken.yaml")


def test_shipped_configs_validate():
    paths = sorted(CONFIGS.glob("*.yaml"))
    assert paths
    for path in paths:
        load_experiment_config(path)


def test_apply_overrides():
    config, _, _ = inline_config(small())
    assert apply_overrides(config, seed=None, trials=None) is config
    changed = apply_overrides(config, seed=99, trials=None, trace=True)
    assert changed.seed == 99
    assert changed.trials == 6
    assert changed.trace
    with pytest.raises(ConfigurationError):
        apply_overrides(config, trials=0)


def test_apply_overrides_keeps_infinite_bias():
    data = small(scheme={"name": "kgw", "params": {"delta": math.inf}}, attack={"delta": math.inf})
    config, _, _ = inline_config(data)
    changed = apply_overrides(config, seed=3)
    assert changed.seed == 3
    assert math.isinf(changed.scheme.params["delta"])
    assert math.isinf(changed.attack.delta)


def test_cli_default_seed_with_infinite_bias(tmp_path):
    # no seed in the file, so the settings' default seed goes through the override path
    data = small(
        trials=2,
        model={"kind": "uniform", "vocab_size": 20, "length": 60},
        scheme={"name": "kgw", "params": {"delta": math.inf}},
    )
    del data["seed"]
    path = tmp_path / "hard.yaml"
    path.write_text(yaml.safe_dump(data))
    assert main(["generate", "--config", str(path), "--out", str(tmp_path / "g")]) == 0
    record = RecordStore.load_record(tmp_path / "g")
    assert all(trial.detection.decision == 1 for trial in record.trials)


def test_tables_with_gaps_keep_integer_columns(tmp_path):
    store = RecordStore(tmp_path)
    generate_rows = [
        {"trial": 0, "statistic": 4.5, "z": 4.5, "decision": 1, "quality": 0.7},
        {"trial": 1, "error": "no marked output"},
    ]
    store.write_table(generate_rows, "generate.csv", GENERATE_COLUMNS, GENERATE_DTYPES)
    attack_rows = [
        {"trial": 0, "decision_before": 1, "decision_after": 0, "success": True},
        {"trial": 1, "filtered": True},
    ]
    store.write_table(attack_rows, "attack.csv", ATTACK_COLUMNS, ATTACK_DTYPES)
    store.write_table(attack_rows, "validate.csv", ATTACK_COLUMNS, ATTACK_DTYPES)
    # a dtype for a column the table lacks is ignored
    store.write_table([{"trial": 0}], "other.csv", ["trial"], ATTACK_DTYPES)

    generate = pd.read_csv(tmp_path / "generate.csv", dtype=str)
    assert generate["decision"].tolist()[0] == "1"
    assert pd.isna(generate["decision"].tolist()[1])
    for name in ("attack.csv", "validate.csv"):
        frame = pd.read_csv(tmp_path / name, dtype=str)
        assert frame["decision_before"].tolist()[0] == "1"
        assert frame["decision_after"].tolist()[0] == "0"
        assert frame[["decision_before", "decision_after"]].iloc[1].isna().all()
    assert pd.read_csv(tmp_path / "other.csv")["trial"].tolist() == [0]


async def test_model_file_is_checked_after_loading(tmp_path):
    path = tmp_path / "chain.txt"
    dump_markov_model(MarkovModel.uniform(5, order=1, length=8), path)
    model = {"kind": "file", "path": str(path)}

    # the file's length and vocabulary apply, not the section defaults (3 tokens, length 4)
    data = small(trials=2, model=model, prompt={"tokens": [4]}, perturber={"span_length": 6})
    result = await run("generate", tmp_path / "ok", data)
    assert result.exit_code == 0
    assert all(trial.output.length == 8 for trial in result.record.trials)

    too_long = small(trials=2, model=model, perturber={"span_length": 9})
    inline_config(too_long)
    with pytest.raises(ConfigurationError) as info:
        await run("generate", tmp_path / "long", too_long)
    assert "perturber.span_length" in str(info.value)

    outside = small(trials=2, model=model, prompt={"tokens": [5]})
    with pytest.raises(ConfigurationError) as info:
        await run("generate", tmp_path / "outside", outside)
    assert "prompt.tokens" in str(info.value)

    reference = {**REFERENCE, "length": 8}
    mismatched = small(trials=2, model=model, quality={"reference": reference})
    with pytest.raises(ConfigurationError) as info:
        await run("generate", tmp_path / "mismatch", mismatched)
    assert "quality.reference" in str(info.value)


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("WATERMARK_LAB_WORKERS", "4")
    monkeypatch.setenv("WATERMARK_LAB_ENUMERATION_CAP", "500")
    settings = Settings()
    assert settings.workers == 4
    assert settings.enumeration_cap == 500


def test_stage_wraps_failures():
    timing = {}
    with pytest.raises(HarnessError) as info:
        with stage("work", timing):
            raise ValueError("bad")
    assert info.value.stage == "work"
    assert "internal error" in str(info.value)
    assert "work" in timing

    with pytest.raises(HarnessError) as info:
        with stage("work"):
            raise SchemeError("nope")
    assert isinstance(info.value.cause, SchemeError)

    with pytest.raises(ConfigurationError):
        with stage("work"):
            raise ConfigurationError("cfg")


def test_quality_grid_labels():
    grid = quality_grid(
        pd.Series([0.1, 0.2, 0.2, 0.5]).to_numpy(), 0.2, {"v=0": 0.1, "v=50": 0.2}, 100
    )
    labels = dict(grid)
    assert [q for q, _ in grid] == sorted(q for q, _ in grid)
    assert labels[0.1] == "v=0"
    assert labels[0.2] == "q_min"
    assert labels[0.5] == "distinct"
    assert grid[-1][1] == "above_max"
    assert grid[-1][0] > 0.5


async def test_unknown_command(tmp_path):
    with pytest.raises(ConfigurationError):
        await run("bogus", tmp_path, small())


async def test_generate_independent_of_worker_count(tmp_path):
    one = await run("generate", tmp_path / "one", small(), workers=1)
    three = await run("generate", tmp_path / "three", small(), workers=3)
    for name in ("record.json", "generate.csv"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "three" / name).read_bytes()
    assert one.record == three.record
    assert (tmp_path / "one" / "timing.json").exists()
    assert (tmp_path / "one" / "config.yaml").exists()


async def test_generate_detects_kgw(tmp_path):
    data = small(trials=20, model={"kind": "uniform", "vocab_size": 5, "length": 60})
    data["scheme"]["params"]["delta"] = 4.0
    result = await run("generate", tmp_path, data)
    frame = pd.read_csv(tmp_path / "generate.csv")
    assert len(frame) == 20
    assert frame["z"].mean() > 4.0
    assert result.record.rates["detected"].point > 0.5
    assert result.exit_code == 0


async def test_generate_without_bias_centers_z(tmp_path):
    data = small(
        trials=200,
        model={"kind": "uniform", "vocab_size": 20, "length": 60},
        scheme={"name": "kgw", "params": {"delta": 0.0}},
    )
    result = await run("generate", tmp_path, data, workers=4)
    frame = pd.read_csv(tmp_path / "generate.csv")
    assert len(frame) == 200
    assert abs(frame["z"].mean()) <= 0.3
    assert abs(result.record.summary["mean_z"]) <= 0.3


async def test_fixed_key_exp_outputs_repeat(tmp_path):
    data = small(
        fixed_key=True,
        scheme={"name": "exp", "params": {"key_sequence_length": 16, "resamples": 20}},
    )
    result = await run("generate", tmp_path, data)
    outputs = {trial.output.tokens for trial in result.record.trials}
    assert len(outputs) == 1
    assert result.record.summary["fixed_key"]


async def test_generation_failures_are_recorded(tmp_path):
    params = {"target_fp_rate": 1e-6, "rejection_cap": 1}
    data = small(scheme={"name": "synthetic", "params": params})
    result = await run("generate", tmp_path, data)
    assert result.record.summary["errors"] == 6
    assert result.record.rates == {}
    frame = pd.read_csv(tmp_path / "generate.csv")
    assert frame["error"].notna().all()


async def test_zero_step_attack_changes_nothing(tmp_path):
    result = await run("attack", tmp_path, small(attack={"max_steps": 0, "t_err": 0}))
    for trial in result.record.trials:
        assert trial.attack.final == trial.output
        assert trial.attack.detection_after == trial.detection
    frame = pd.read_csv(tmp_path / "attack.csv")
    assert (frame["z_before"] == frame["z_after"]).all()
    assert (frame["quality_before"] == frame["quality_after"]).all()


async def test_filtered_inputs_are_not_attacked(tmp_path):
    result = await run("attack", tmp_path, small(attack={"max_steps": 3, "min_input_quality": 1.0}))
    assert result.record.summary["attacked"] == 0
    assert result.record.summary["filtered"] == 6
    assert "success" not in result.record.rates
    assert pd.read_csv(tmp_path / "attack.csv")["filtered"].all()


async def test_traced_attack_feeds_plot_data(tmp_path):
    data = small(trials=3, trace=True, attack={"max_steps": 5})
    result = await run("attack", tmp_path / "attack", data)
    assert "eps_pert" in result.record.rates
    trace = pd.read_csv(tmp_path / "attack" / "trace.csv")
    assert len(trace) == 15
    assert trace["z"].notna().all()

    record = RecordStore.load_record(tmp_path / "attack")
    paths = ExperimentService(Settings()).plot_data([record], tmp_path / "plots")
    steps = pd.read_csv(paths["steps"])
    assert len(steps) == 3 * 5 * 2
    means = pd.read_csv(paths["step_means"])
    assert len(means) == 10
    assert (means["count"] == 3).all()
    assert len(pd.read_csv(paths["histograms"])) == 4 * 20


def test_plot_data_step_means_across_runs(tmp_path):
    records = [traced_record([1.0, 3.0]), traced_record([3.0, 5.0])]
    paths = ExperimentService(Settings()).plot_data(records, tmp_path)
    means = pd.read_csv(paths["step_means"])
    z = means[means["metric"] == "z"].set_index("step")
    assert z.loc[1, "mean"] == pytest.approx(2.0)
    assert z.loc[2, "mean"] == pytest.approx(4.0)
    assert (z["count"] == 2).all()
    quality = means[means["metric"] == "quality"]
    assert quality["mean"].tolist() == pytest.approx([0.5, 0.5])
    assert sorted(pd.read_csv(paths["steps"])["run"].unique()) == [0, 1]


def test_plot_data_without_records_writes_headers(tmp_path):
    paths = ExperimentService(Settings()).plot_data([], tmp_path)
    steps = pd.read_csv(paths["steps"])
    assert steps.empty
    assert list(steps.columns) == STEP_COLUMNS


async def test_plot_data_needs_traces(tmp_path):
    await run("generate", tmp_path / "gen", small())
    record = RecordStore.load_record(tmp_path / "gen" / "record.json")
    with pytest.raises(HarnessError):
        ExperimentService(Settings()).plot_data([record], tmp_path / "plots")
    with pytest.raises(HarnessError):
        RecordStore.load_record(tmp_path / "nothing")


async def test_theory_on_complete_graphs(tmp_path):
    data = enumerable(theory={"percentile_samples": 100})
    result = await run("theory", tmp_path, data)
    frame = pd.read_csv(tmp_path / "theory.csv")
    filled = frame[~frame["empty"]]
    assert len(filled) > 0
    assert filled["g"].abs().max() < 1e-9
    assert (filled["empirical_t"] == 1).all()
    assert frame.iloc[-1]["label"] == "above_max"
    assert frame.iloc[-1]["empty"]
    assert "q_min" in set(frame["label"])
    assert result.record.summary["max_empirical_over_bound"] <= 1.0
    assert result.record.summary["outputs"] == 81


async def test_theory_respects_enumeration_cap(tmp_path):
    config, digest, raw = inline_config(enumerable(theory={"percentile_samples": 100}))
    service = ExperimentService(Settings(enumeration_cap=10))
    with pytest.raises(EnumerationCapError):
        await service.run("theory", config, digest, raw, tmp_path)


async def test_validate_reports_verdict(tmp_path):
    data = enumerable(
        length=3,
        trials=100,
        scheme={"name": "synthetic", "params": {"target_fp_rate": 0.1}},
        attack={"mode": "extended", "delta": 0.0},
        theory={"percentile_samples": 100, "preservation_calls": 100},
    )
    result = await run("validate", tmp_path, data)
    summary = result.record.summary
    assert summary["verdict"] in ("PASS", "FAIL")
    assert summary["reason"] == "bound"
    assert result.exit_code == (0 if summary["verdict"] == "PASS" else 1)
    assert summary["eps_pos"] == 0.1
    assert summary["max_steps"] == summary["t_mix"] + summary["t_err"]
    assert summary["t_mix"] == max(summary["t_mix_bound"], summary["t_mix_empirical"])
    for report in result.record.spectral:
        assert summary["t_mix"] >= report.mixing_steps
        assert summary["t_mix"] >= report.empirical_mixing
    expected_source = "empirical" if summary["t_mix_empirical"] > summary["t_mix_bound"] else "bound"
    assert summary["t_mix_source"] == expected_source
    assert 0.0 <= summary["bound"] <= 1.0
    assert len(pd.read_csv(tmp_path / "validate.csv")) == 100


async def test_validate_skips_keys_with_empty_marked_sets(tmp_path, caplog):
    # 27 outputs at rate 0.02: over half of all keys mark nothing
    params = {"target_fp_rate": 0.02, "rejection_cap": 200}
    data = enumerable(
        length=3,
        trials=20,
        scheme={"name": "synthetic", "params": params},
        attack={"mode": "extended", "delta": 0.0},
        theory={"percentile_samples": 100, "preservation_calls": 100},
    )
    result = await run("validate", tmp_path, data)
    summary = result.record.summary
    assert summary["skipped_keys"] > 0
    assert summary["preservation_skipped_keys"] > 0
    assert summary["reason"] == "bound"
    assert result.exit_code in (0, 1)
    assert result.record.rates["success"].excluded > 0
    assert "key skipped" in caplog.text


async def test_validate_reducible_graph_is_precondition_failure(tmp_path):
    config, digest, raw = load_experiment_config(CONFIGS / "reducible_fixture.yaml")
    service = ExperimentService(Settings())
    result = await service.run("validate", config, digest, raw, tmp_path)
    assert result.exit_code == 1
    assert result.record.summary["verdict"] == "FAIL"
    assert result.record.summary["reason"] == "precondition"
    assert "precondition" in result.message
    assert not (tmp_path / "validate.csv").exists()


def test_cli_exit_codes(tmp_path):
    path = tmp_path / "theory.yaml"
    path.write_text(yaml.safe_dump(enumerable(theory={"percentile_samples": 100})))
    assert main(["theory", "--config", str(path), "--out", str(tmp_path / "t")]) == 0
    assert (tmp_path / "t" / "theory.csv").exists()

    missing = str(tmp_path / "missing.yaml")
    assert main(["generate", "--config", missing, "--out", str(tmp_path)]) == 2
    assert main(["plotdata", str(tmp_path / "t")]) == 2
    assert main(["plotdata", str(tmp_path / "t"), "--out", str(tmp_path / "p")]) == 3
    with pytest.raises(SystemExit) as info:
        main(["generate", "--seed", "-1"])
    assert info.value.code == 2


def test_cli_seed_override(tmp_path):
    path = tmp_path / "gen.yaml"
    path.write_text(yaml.safe_dump(small()))
    out = tmp_path / "g"
    argv = ["generate", "--config", str(path), "--seed", "42", "--trials", "2", "--out", str(out)]
    assert main(argv) == 0
    record = RecordStore.load_record(out)
    assert record.master_seed == 42
    assert len(record.trials) == 2
    assert record.config_hash == config_hash(path.read_bytes())
