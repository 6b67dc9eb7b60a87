import json

import pandas as pd
import pytest

from src.cli import build_parser, main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--n", "6000", "--seed", "3", "--n-jobs", "1", "--out", str(root / "gen")]) == 0
    assert main(["fit", "--data", str(root / "gen" / "dataset.csv"), "--seed", "3", "--out", str(root / "fit")]) == 0
    return root


def _manifest(directory):
    return json.loads((directory / "manifest.json").read_text())


def test_generate_writes_dataset_and_manifest(workdir):
    frame = pd.read_csv(workdir / "gen" / "dataset.csv")
    assert len(frame) == 6000
    assert list(frame.columns) == ["z", "a", "y0", "y1", "t", "y"]
    manifest = _manifest(workdir / "gen")
    assert manifest["command"] == "generate"
    assert manifest["seed"] == 3
    assert manifest["config"]["generator"]["k"] == 1.6
    assert (workdir / "gen" / "moments.json").exists()


def test_fit_scores_the_test_split(workdir):
    scored = pd.read_csv(workdir / "fit" / "scored.csv")
    assert {"pi_hat", "s0_hat", "obs_hat"} <= set(scored.columns)
    assert len(scored) == 3000
    manifest = _manifest(workdir / "fit")
    assert manifest["split"]["n_test"] == 3000
    assert len(manifest["test_indices"]) == 3000
    for role in ("observational", "propensity", "counterfactual"):
        assert (workdir / "fit" / "models" / f"{role}.json").exists()


def test_evaluate_writes_estimate(workdir, capsys):
    out = workdir / "evaluate"
    code = main(["evaluate", "--data", str(workdir / "fit" / "scored.csv"), "--method", "dr", "--out", str(out)])
    assert code == 0
    estimate = json.loads((out / "estimate.json").read_text())
    assert estimate["metric"] == "mean_y0"
    assert 0.0 < estimate["value"] < 1.0
    assert estimate["ci"][0] <= estimate["value"] <= estimate["ci"][1]
    assert json.loads(capsys.readouterr().out)["metric"] == "mean_y0"


def test_curves_and_audit(workdir):
    scored = str(workdir / "fit" / "scored.csv")
    assert main(["curves", "--data", scored, "--n-thresholds", "21", "--out", str(workdir / "curves")]) == 0
    frame = pd.read_csv(workdir / "curves" / "curves.csv")
    assert not frame.empty
    assert list(frame.columns) == ["model", "mode", "curve", "param", "x", "y", "ci_low", "ci_high"]
    areas = json.loads((workdir / "curves" / "areas.json").read_text())
    assert "roc/dr" in areas

    audit_args = ["audit", "--data", scored, "--balance", "--independence", "--n-bootstrap", "10", "--n-jobs", "1"]
    assert main(audit_args + ["--out", str(workdir / "audit")]) == 0
    report = json.loads((workdir / "audit" / "fairness_report.json").read_text())
    assert {"groups", "disparities", "residuals", "independence"} <= set(report)
    assert _manifest(workdir / "audit")["command"] == "audit"


def test_missing_nuisances_is_a_reported_error(workdir, capsys):
    code = main(["evaluate", "--data", str(workdir / "gen" / "dataset.csv"), "--out", str(workdir / "bad")])
    assert code == 2
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error"] == "ParameterError"


def test_missing_file_is_a_format_error(tmp_path, capsys):
    code = main(["fit", "--data", str(tmp_path / "absent.csv"), "--out", str(tmp_path / "fit")])
    assert code == 2
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error"] == "DataFormatError"


def test_invalid_generator_parameters(tmp_path, capsys):
    code = main(["generate", "--n", "10", "--c", "1.5", "--out", str(tmp_path)])
    assert code == 2
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "ParameterError"


def test_parser_knows_every_command():
    parser = build_parser()
    for command in ("generate", "fit", "evaluate", "curves", "audit", "reweigh", "postprocess"):
        args = parser.parse_args([command] + (["--data", "x.csv"] if command in ("fit", "evaluate", "curves", "audit") else []))
        assert args.command == command
    for experiment in ("fig2", "fig5", "table2", "fig6", "appD", "appD1", "appE"):
        assert parser.parse_args(["reproduce", experiment]).experiment == experiment
    assert parser.parse_args(["reproduce", "rate-table"]).experiment == "rate-table"
    with pytest.raises(SystemExit):
        parser.parse_args(["reproduce", "everything"])


def test_usage_errors_emit_the_error_record(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["reproduce", "everything"])
    assert exc.value.code == 2
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error"] == "UsageError"
    assert "everything" in record["message"]
    assert record["details"]["usage"].startswith("usage:")


def test_fit_splits_with_the_generator_seed(workdir):
    out = workdir / "fit_default_seed"
    assert main(["fit", "--data", str(workdir / "gen" / "dataset.csv"), "--out", str(out)]) == 0
    manifest = _manifest(out)
    assert manifest["seed"] == 3
    assert manifest["test_indices"] == _manifest(workdir / "fit")["test_indices"]
