"""Command surface: artifact production, exit codes, manifest reproducibility."""

import csv
import json

import numpy as np
import pytest

from stratarm.cli import main
from stratarm.pipeline import ARTIFACT_NAMES, PRESETS
from stratarm import artifacts

FAST = [
    "--preset", "desk",
    "--trees", "20",
    "--stage1-iterations", "120", "--stage1-burnin", "60",
    "--stage2-iterations", "60", "--stage2-burnin", "30",
]


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    rc = main(["simulate", "--scenario", "1", "--n", "45", "--seed", "7",
               "--out-dir", str(out)])
    assert rc == 0
    return out


def test_simulate_writes_inputs(sim_dir):
    for name in ("data.csv", "schema.json", "truth.csv", "encodings.csv"):
        assert (sim_dir / name).exists()
    with open(sim_dir / "truth.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["subject_id", "cluster", "ey_arm_1", "ey_arm_2", "ey_arm_3"]
    assert len(rows) == 46


@pytest.fixture(scope="module")
def pipeline_dir(sim_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = main(["pipeline", "--data", str(sim_dir / "data.csv"),
               "--schema", str(sim_dir / "schema.json"),
               "--out-dir", str(out), "--seed", "5", *FAST])
    assert rc == 0
    return out


def test_pipeline_writes_all_artifacts(pipeline_dir):
    for name in ARTIFACT_NAMES.values():
        assert (pipeline_dir / name).exists(), name
    # every artifact parses
    matrix = artifacts.read_potential_outcomes(pipeline_dir / "potential_outcomes.csv")
    assert matrix.values.shape == (45, 3)
    sim = artifacts.read_similarity(pipeline_dir / "similarity.bin")
    assert sim.values.shape == (45, 45)
    labels = artifacts.read_labels(pipeline_dir / "representative.csv")
    assert labels.shape == (45,)
    trace = artifacts.read_trace(pipeline_dir / "trace.csv",
                                 pipeline_dir / "cluster_params.csv")
    assert len(trace.records) == 30
    manifest = artifacts.read_json(pipeline_dir / "manifest.json")
    assert manifest["seed"] == 5
    with open(pipeline_dir / "profiles.csv", newline="") as fh:
        header = next(csv.reader(fh))
    assert header == ["cluster", "parameter", "quantile", "value", "flag"]


def test_rerun_from_manifest_is_byte_identical(pipeline_dir, tmp_path):
    out2 = tmp_path / "rerun"
    rc = main(["pipeline", "--from-manifest", str(pipeline_dir / "manifest.json"),
               "--out-dir", str(out2)])
    assert rc == 0
    first = (pipeline_dir / "representative.csv").read_bytes()
    second = (out2 / "representative.csv").read_bytes()
    assert first == second
    assert ((pipeline_dir / "potential_outcomes.csv").read_bytes()
            == (out2 / "potential_outcomes.csv").read_bytes())


def test_evaluate_identical_files(tmp_path, capsys):
    path = tmp_path / "labels.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "cluster"])
        for i, lab in enumerate([1, 1, 2, 2], start=1):
            writer.writerow([i, lab])
    rc = main(["evaluate", "--pred", str(path), "--truth", str(path)])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["ari"] == 1.0


def test_evaluate_ari_fixture(tmp_path, capsys):
    def write(path, labels):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject_id", "cluster"])
            for i, lab in enumerate(labels, start=1):
                writer.writerow([i, lab])

    truth = tmp_path / "truth.csv"
    pred = tmp_path / "pred.csv"
    write(truth, [0, 0, 1, 1])
    write(pred, [0, 0, 1, 2])
    rc = main(["evaluate", "--pred", str(pred), "--truth", str(truth)])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["ari"] == pytest.approx(4 / 7)


def test_evaluate_missing_file_exits_2(tmp_path, capsys):
    rc = main(["evaluate", "--pred", str(tmp_path / "nope.csv"),
               "--truth", str(tmp_path / "nope.csv")])
    assert rc == 2
    assert "nope.csv" in capsys.readouterr().err


def test_evaluate_length_mismatch_exits_2(tmp_path, capsys):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    a.write_text("subject_id,cluster\n1,1\n2,2\n")
    b.write_text("subject_id,cluster\n1,1\n")
    rc = main(["evaluate", "--pred", str(a), "--truth", str(b)])
    assert rc == 2


def test_config_error_exits_1(tmp_path, capsys):
    schema = tmp_path / "schema.json"
    schema.write_text(json.dumps({"covariates": [], "treatment": "arm",
                                  "outcome": "y", "n_arms": 3}))
    data = tmp_path / "data.csv"
    data.write_text("arm,y\n1,0\n")
    rc = main(["pipeline", "--data", str(data), "--schema", str(schema),
               "--out-dir", str(tmp_path / "out"), *FAST])
    assert rc == 1


def test_data_error_exits_2(sim_dir, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("x1,x2,x3,arm,y\n1,2,3,9,0\n")
    rc = main(["pipeline", "--data", str(bad), "--schema", str(sim_dir / "schema.json"),
               "--out-dir", str(tmp_path / "out"), *FAST])
    assert rc == 2


def test_fit_stage1_and_cluster_and_postprocess_chain(sim_dir, tmp_path):
    s1 = tmp_path / "s1"
    rc = main(["fit-stage1", "--data", str(sim_dir / "data.csv"),
               "--schema", str(sim_dir / "schema.json"), "--out-dir", str(s1),
               "--trees", "20", "--iterations", "120", "--burnin", "60",
               "--seed", "3", "--trace"])
    assert rc == 0
    assert (s1 / "potential_outcomes.csv").exists()
    assert (s1 / "stage1_trace.csv").exists()

    s2 = tmp_path / "s2"
    rc = main(["cluster", "--data", str(sim_dir / "data.csv"),
               "--schema", str(sim_dir / "schema.json"),
               "--potential-outcomes", str(s1 / "potential_outcomes.csv"),
               "--out-dir", str(s2), "--iterations", "60", "--burnin", "30",
               "--seed", "4", "--similarity-csv"])
    assert rc == 0
    assert (s2 / "similarity.bin").exists()
    assert (s2 / "similarity.csv").exists()

    s3 = tmp_path / "s3"
    rc = main(["postprocess", "--similarity", str(s2 / "similarity.bin"),
               "--trace", str(s2 / "trace.csv"),
               "--trace-params", str(s2 / "cluster_params.csv"),
               "--out-dir", str(s3)])
    assert rc == 0
    assert (s3 / "representative.csv").exists()
    assert (s3 / "profiles.csv").exists()


def test_report_command_aggregates(tmp_path):
    out = tmp_path / "report"
    rc = main(["report", "--scenario", "1", "--n", "45", "--replicates", "2",
               "--seed", "11", "--out-dir", str(out), *FAST])
    assert rc == 0
    agg = json.loads((out / "aggregate.json").read_text())
    assert agg["n_replicates"] == 2
    with open(out / "replicates.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["replicate", "ari", "completeness", "homogeneity", "n_cluster"]
    assert len(rows) == 3


def test_simulate_replicate_directories(tmp_path):
    out = tmp_path / "multi"
    rc = main(["simulate", "--scenario", "2", "--n", "45", "--replicates", "2",
               "--seed", "1", "--out-dir", str(out)])
    assert rc == 0
    assert (out / "replicate_000" / "data.csv").exists()
    assert (out / "replicate_001" / "data.csv").exists()


def test_help_enumerates_prior_defaults(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    for token in ("kappa = 0.01", "Gamma(2, 1)", "Beta(0.5, 0.5)", "200 trees",
                  "0.5/0.25/0.25", "min(10, n/10)"):
        assert token in text


def test_pipeline_does_not_mutate_inputs(sim_dir, pipeline_dir):
    # re-running on the same inputs makes no difference because inputs are
    # untouched; compare against a fresh simulate of the same config
    import hashlib

    digest = hashlib.sha256((sim_dir / "data.csv").read_bytes()).hexdigest()
    rc = main(["simulate", "--scenario", "1", "--n", "45", "--seed", "7",
               "--out-dir", str(sim_dir)])
    assert rc == 0
    assert hashlib.sha256((sim_dir / "data.csv").read_bytes()).hexdigest() == digest


def test_presets_match_published_iteration_counts():
    sim = PRESETS["sim"]
    assert (sim.stage1_iterations, sim.stage1_burn_in) == (6000, 1000)
    assert (sim.stage2_iterations, sim.stage2_burn_in) == (2000, 1000)
    app = PRESETS["application"]
    assert (app.stage2_iterations, app.stage2_burn_in) == (40000, 10000)
