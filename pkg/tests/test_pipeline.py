"""Orchestration tests: reports, artifacts, transports, sweeps, isolation."""
import json
from pathlib import Path

import numpy as np
import pytest

from sentinelzsl import config, nncore, pipeline
from sentinelzsl.pipeline import (
    ProviderInputs, evaluate_artifact, load_model, run_experiment, run_sweep,
    save_model, write_json,
)
from sentinelzsl.sentinel import ConfigError

# Small enough to finish in well under a second, big enough to learn.
TINY = {
    "num_seen": 4, "num_unseen": 2, "feature_dim": 16, "semantic_dim": 4,
    "samples_per_class": 60, "semantic_scale": 1.0, "teacher_epochs": 20,
    "gen_epochs": 30, "student_epochs": 40, "features_per_class": 40,
    "batch_size": 32, "noise_dim": 6, "generator_hidden": [64],
    "student_hidden": [16],
}


def tiny_config(**overrides) -> config.RunConfig:
    return config.from_dict({**TINY, **overrides})


@pytest.fixture(scope="module")
def whitebox_report():
    return run_experiment(tiny_config(), write_artifacts=False)


@pytest.fixture(scope="module")
def blackbox_report():
    return run_experiment(tiny_config(protocol="blackbox"), write_artifacts=False)


# --- report shape -------------------------------------------------------------

def test_report_has_the_documented_sections(whitebox_report):
    assert set(whitebox_report) == {
        "config", "dataset", "teacher", "session", "aborted", "student",
        "classifier", "generator"}


def test_report_echoes_the_full_config(whitebox_report):
    assert whitebox_report["config"] == tiny_config().as_dict()


def test_report_dataset_section(whitebox_report):
    ds = whitebox_report["dataset"]
    assert ds["provenance"] == ["synthetic"]
    assert ds["num_classes"] == 6
    assert ds["rows"] == 6 * 60


def test_report_student_metrics_complete(whitebox_report):
    gzsl = whitebox_report["student"]["gzsl"]
    assert set(gzsl) == {"seen", "unseen", "harmonic"}
    assert gzsl["harmonic"] > 50.0
    assert isinstance(whitebox_report["student"]["czsl"], float)
    assert len(whitebox_report["student"]["per_class"]) == 6


def test_report_teacher_metrics(whitebox_report):
    teacher = whitebox_report["teacher"]
    assert teacher["eval_accuracy"] >= 95.0
    assert "full_space" in teacher["eval"]
    assert "epsilon" not in teacher  # no privacy knobs switched on


def test_omniscient_run_has_no_unseen_classifier(whitebox_report):
    assert whitebox_report["classifier"] is None


def test_quasi_run_fits_unseen_classifier():
    report = run_experiment(tiny_config(teacher_mode="quasi_omniscient"),
                            write_artifacts=False)
    assert report["classifier"] is not None
    assert report["classifier"]["czsl"] >= 50.0
    assert "restricted_head" in report["teacher"]["eval"]


def test_generator_section_counts(whitebox_report):
    gen = whitebox_report["generator"]
    assert gen["epochs_run"] == TINY["gen_epochs"]
    kept = gen["kept_per_class"]
    assert set(kept) == set(range(6))
    assert all(0 <= n <= TINY["features_per_class"] for n in kept.values())


def test_report_is_json_serializable(whitebox_report, blackbox_report):
    json.dumps(whitebox_report)
    json.dumps(blackbox_report)


# --- determinism and transports -------------------------------------------------

def test_same_config_same_report(whitebox_report):
    again = run_experiment(tiny_config(), write_artifacts=False)
    assert json.dumps(again, sort_keys=True) == json.dumps(
        whitebox_report, sort_keys=True)


def test_seed_changes_the_outcome(whitebox_report):
    other = run_experiment(tiny_config(seed=1), write_artifacts=False)
    assert other["session"] != whitebox_report["session"] or (
        other["student"] != whitebox_report["student"])


def test_tcp_and_in_process_agree(whitebox_report):
    over_tcp = run_experiment(tiny_config(transport="tcp"),
                              write_artifacts=False)
    for leg in ("seen", "unseen", "harmonic"):
        assert over_tcp["student"]["gzsl"][leg] == pytest.approx(
            whitebox_report["student"]["gzsl"][leg], abs=1e-9)
    assert over_tcp["teacher"] == whitebox_report["teacher"]
    assert (over_tcp["generator"]["kept_per_class"]
            == whitebox_report["generator"]["kept_per_class"])


def test_budget_abort_yields_partial_report():
    report = run_experiment(tiny_config(budget=3), write_artifacts=False)
    assert report["aborted"] is True
    assert report["student"] is None and report["classifier"] is None
    assert report["session"]["feedback_messages"] == 3


# --- artifacts on disk -----------------------------------------------------------

def test_run_writes_all_artifacts(tmp_path):
    cfg = tiny_config(output_dir=str(tmp_path / "out"))
    report = run_experiment(cfg)
    out = Path(cfg.output_dir)
    for name in ("config.json", "report.json", "teacher.json",
                 "generator.json", "student.json", "training_log.jsonl"):
        assert (out / name).exists(), name
    assert json.loads((out / "report.json").read_text()) == json.loads(
        json.dumps(report))
    assert json.loads((out / "config.json").read_text()) == cfg.as_dict()


def test_quasi_run_also_saves_classifier(tmp_path):
    cfg = tiny_config(teacher_mode="quasi_omniscient",
                      output_dir=str(tmp_path / "out"))
    run_experiment(cfg)
    model, meta = load_model(Path(cfg.output_dir) / "classifier.json")
    assert meta["kind"] == "unseen_classifier"
    assert model.layer_dims[0] == TINY["feature_dim"]


def test_training_log_phases(tmp_path):
    cfg = tiny_config(output_dir=str(tmp_path / "out"))
    run_experiment(cfg)
    lines = (Path(cfg.output_dir) / "training_log.jsonl").read_text().splitlines()
    phases = [json.loads(line)["phase"] for line in lines]
    assert set(phases) == {"teacher", "generator", "student"}
    assert phases == sorted(phases, key=("teacher", "generator", "student").index)


def test_save_and_load_model_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    model = nncore.init_mlp([4, 3], ["identity"], rng)
    path = tmp_path / "m.json"
    save_model(path, model, "student", note="x")
    loaded, meta = load_model(path)
    assert meta == {"kind": "student", "note": "x"}
    assert all(np.array_equal(a, b)
               for a, b in zip(model.weights, loaded.weights))


def test_load_model_rejects_non_model_file(tmp_path):
    path = tmp_path / "notamodel.json"
    write_json(path, {"hello": 1})
    with pytest.raises(ConfigError, match="notamodel"):
        load_model(path)


def test_evaluate_artifact_dispatches_on_kind(tmp_path):
    cfg = tiny_config(output_dir=str(tmp_path / "out"),
                      teacher_mode="quasi_omniscient")
    run_experiment(cfg)
    out = Path(cfg.output_dir)
    teacher = evaluate_artifact(cfg, out / "teacher.json")
    assert teacher["kind"] == "teacher" and "full_space" in teacher["metrics"]
    student = evaluate_artifact(cfg, out / "student.json")
    assert set(student["metrics"]) == {"gzsl", "czsl"}
    classifier = evaluate_artifact(cfg, out / "classifier.json")
    assert set(classifier["metrics"]) == {"czsl"}


def test_evaluate_artifact_rejects_unknown_kind(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "odd.json"
    save_model(path, nncore.init_mlp([4, 3], ["identity"], rng), "oracle")
    with pytest.raises(ConfigError, match="oracle"):
        evaluate_artifact(tiny_config(), path)


# --- provider isolation -----------------------------------------------------------

def test_provider_inputs_hold_copies():
    dataset = pipeline.build_dataset(tiny_config())
    inputs = ProviderInputs.from_dataset(dataset)
    assert not np.shares_memory(inputs.semantics, dataset.semantics)
    assert not hasattr(inputs, "features")
    assert all(isinstance(c, int) for c in inputs.seen_ids + inputs.unseen_ids)


def test_whitebox_session_log_lists_only_feedback_traffic(whitebox_report):
    session = whitebox_report["session"]
    assert session["uploads"] == session["feedback_messages"]
    assert session["mid_risk_fields"] == ["WhiteboxFeedback.loss_grad"]


def test_blackbox_session_log_has_no_mid_risk_fields(blackbox_report):
    assert blackbox_report["session"]["mid_risk_fields"] == []


# --- sweeps ---------------------------------------------------------------------

def test_sweep_alpha_rows(tmp_path):
    rows = run_sweep(tiny_config(), "alpha", [0.5], [0])
    assert len(rows) == 1
    assert set(rows[0]) == {"alpha", "student_unseen", "student_seen",
                            "student_h"}
    assert rows[0]["alpha"] == 0.5


def test_sweep_sigma_probes_teacher_only():
    rows = run_sweep(tiny_config(), "sigma_n", [0.0, 0.5], [0])
    assert [r["sigma_n"] for r in rows] == [0.0, 0.5]
    for row in rows:
        assert set(row) == {"sigma_n", "epsilon", "teacher_accuracy"}
    assert rows[1]["epsilon"] < rows[0]["epsilon"]  # sigma up, epsilon down


def test_sweep_seed_averaging_changes_values():
    one = run_sweep(tiny_config(), "alpha", [0.5], [0])
    two = run_sweep(tiny_config(), "alpha", [0.5], [0, 1])
    assert one[0] != two[0]


def test_sweep_rejects_unknown_axis():
    with pytest.raises(ConfigError, match="unknown sweep axis"):
        run_sweep(tiny_config(), "gamma", [1.0], [0])


def test_sweep_requires_values_and_seeds():
    with pytest.raises(ConfigError, match="value"):
        run_sweep(tiny_config(), "alpha", [], [0])
    with pytest.raises(ConfigError, match="seed"):
        run_sweep(tiny_config(), "alpha", [0.5], [])
