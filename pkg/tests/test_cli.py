import csv
import json
import logging
from pathlib import Path

import jsonschema
import numpy as np
import pytest
import yaml

from copulamon import cli
from copulamon.errors import EpochError
from copulamon.cvi import PosteriorState
from copulamon.spline_basis import SplineBasisSpec, design_matrix

SMALL = {
    "window": {"n_w": 100, "n_u": 50},
    "hyper": {"maxiter": 10},
    "init": {"n_records": 400, "maxiter": 60},
    "scenario": {"n_init": 400, "n_blocks": 12, "tau": 6},
    "calibration": {"arl": 20, "n_streams": 3},
    "data": "cleaned.csv",
    "checkpoint": "checkpoint.json",
    "calibration_file": "calibration.json",
}


def write_config(d: Path, **extra) -> str:
    path = d / "run.yaml"
    path.write_text(yaml.safe_dump({**SMALL, **extra}))
    return str(path)


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = write_config(d)
    common = ("--config", cfg, "--out", d, "--seed", 4)
    assert run("simulate", *common) == 0
    assert run("ingest", "--input", d / "scada.csv", *common) == 0
    assert run("fit-init", *common) == 0
    assert run("calibrate", *common) == 0
    assert run("monitor", "--skip-init", *common) == 0
    assert run("baselines", "--skip-init", *common) == 0
    return d, cfg


def test_outputs_written(pipeline):
    d, _ = pipeline
    for name in ("scada.csv", "labels.csv", "scenario.json", "cleaned.csv", "outliers.csv", "ingest.json",
                 "checkpoint.json", "hypothesis.json", "starting_curve.svg", "calibration.json", "report.json",
                 "segments.csv", "trajectory.json", "lambda.svg", "curves.svg", "baselines.json",
                 "baseline_lwz.csv", "baseline_gpr.svg"):
        assert (d / name).exists(), name


def test_report_schema(pipeline):
    d, _ = pipeline
    report = json.loads((d / "report.json").read_text())
    jsonschema.validate(report, cli.REPORT_SCHEMA)
    n_clean = sum(1 for _ in open(d / "cleaned.csv")) - 1
    assert report["offset"] == 400
    # outlier removal shortens the stream, so count windows on the cleaned data
    assert len(report["segments"]) == (n_clean - 400 - 100) // 50 + 1
    for rep in json.loads((d / "baselines.json").read_text()).values():
        jsonschema.validate(rep, cli.REPORT_SCHEMA)
        assert all(isinstance(s["alarm"], bool) for s in rep["segments"])


def test_checkpoint_curve_monotone(pipeline):
    d, _ = pipeline
    ck = json.loads((d / "checkpoint.json").read_text())
    spec = SplineBasisSpec.from_dict(ck["spline"])
    state = PosteriorState.from_dict(ck["state"])
    curve = design_matrix(np.linspace(0, 25, 1000), spec) @ state.mean_beta
    assert np.all(np.diff(curve) >= -1e-12)
    assert ck["n_init"] == 400


def test_evaluate_roundtrip(pipeline):
    d, cfg = pipeline
    out = d / "eval"
    assert run("evaluate", "--config", cfg, "--out", out, "--report", d / "baselines.json",
               "--labels", d / "labels.csv") == 0
    scores = json.loads((out / "evaluation.json").read_text())
    assert set(scores) == {"lwz", "gpr", "llr"}
    assert all(0 <= s["f1"] <= 1 for s in scores.values())


def test_evaluate_perfect_report(pipeline):
    d, cfg = pipeline
    with open(d / "labels.csv") as fh:
        rows = list(csv.DictReader(fh))
    first_bad = min(np.datetime64(r["timestamp"]) for r in rows if r["degraded"] == "1")
    report = json.loads((d / "report.json").read_text())
    for s in report["segments"]:
        s["alarm"] = bool(np.datetime64(s["end"]) >= first_bad)
    assert any(s["alarm"] for s in report["segments"]) and not all(s["alarm"] for s in report["segments"])
    (d / "perfect.json").write_text(json.dumps(report))
    out = d / "perfect"
    assert run("evaluate", "--config", cfg, "--out", out, "--report", d / "perfect.json",
               "--labels", d / "labels.csv") == 0
    s = json.loads((out / "evaluation.json").read_text())["cvi"]
    assert (s["precision"], s["recall"], s["f1"]) == (1.0, 1.0, 1.0)
    assert s["first_alarm_delay"] == 0


def test_simulate_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    for sub in ("a", "b"):
        assert run("simulate", "--config", cfg, "--out", tmp_path / sub, "--seed", 9) == 0
    for name in ("scada.csv", "labels.csv", "scenario.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_fit_init_deterministic(pipeline, tmp_path):
    d, _ = pipeline
    cfg = write_config(tmp_path, data=str(d / "cleaned.csv"))
    for sub in ("a", "b"):
        assert run("fit-init", "--config", cfg, "--out", tmp_path / sub, "--seed", 1) == 0
    assert (tmp_path / "a/checkpoint.json").read_bytes() == (tmp_path / "b/checkpoint.json").read_bytes()
    assert (tmp_path / "a/checkpoint.json").read_bytes() == (d / "checkpoint.json").read_bytes()


def test_empty_input_warns(tmp_path, caplog):
    (tmp_path / "empty.csv").write_text("")
    with caplog.at_level(logging.WARNING):
        assert run("ingest", "--input", tmp_path / "empty.csv", "--out", tmp_path) == 0
    assert "empty" in caplog.text
    assert json.loads((tmp_path / "ingest.json").read_text())["kept"] == 0


def test_malformed_file_names_column(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("timestamp,speed,power_norm\n2021-01-01T00:00:00,5,0.1\n")
    assert run("ingest", "--input", tmp_path / "bad.csv", "--out", tmp_path) == 2
    assert "wind_speed_ms" in capsys.readouterr().err


def test_audit_counts(tmp_path):
    ts = np.datetime64("2021-01-01T00:00:00") + np.arange(110) * np.timedelta64(600, "s")
    lines = ["timestamp,wind_speed_ms,power_norm"]
    powers = [0.4] * 50 + [0.6] * 50 + [0.05, 0.02, 0.08]
    for t, p in zip(ts, powers):
        lines.append(f"{t},7.05,{p}")
    lines.append(f"{ts[103]},30.0,1.0")          # beyond the spline boundary
    lines.append(f"{ts[104]},oops,0.5")         # malformed
    lines.append(f"{ts[105]},7.0")              # malformed
    (tmp_path / "in.csv").write_text("\n".join(lines) + "\n")
    assert run("ingest", "--input", tmp_path / "in.csv", "--out", tmp_path) == 0
    summary = json.loads((tmp_path / "ingest.json").read_text())
    assert summary == {**summary, "records": 104, "skipped_rows": 2, "outliers": 3, "out_of_range": 1, "kept": 100}
    with open(tmp_path / "outliers.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and all(r["reason"] == "bin_below_1pct" for r in rows)


def test_coverage_gap_error(tmp_path, capsys):
    rng = np.random.default_rng(0)
    v = rng.uniform(0, 25, 3000)
    v = v[(v < 10) | (v >= 11)][:1000]
    ts = np.datetime64("2021-01-01T00:00:00") + np.arange(v.size) * np.timedelta64(600, "s")
    rows = "\n".join(f"{t},{x},{min(x / 14, 1)}" for t, x in zip(ts, v))
    (tmp_path / "cleaned.csv").write_text("timestamp,wind_speed_ms,power_norm\n" + rows + "\n")
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"init": {"n_records": 1000}}))
    assert run("fit-init", "--config", cfg, "--out", tmp_path) == 2
    assert "[10, 11)" in capsys.readouterr().err


def test_config_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense_key: 1\n")
    assert run("simulate", "--config", bad, "--out", tmp_path) == 1
    assert "nonsense_key" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        cli.main(["no-such-command"])
    assert exc.value.code == 1
    bad.write_text("window: {n_w: 10, n_u: 20}\n")
    assert run("simulate", "--config", bad, "--out", tmp_path) == 1
    (tmp_path / "kw.csv").write_text("timestamp,wind_speed_ms,power_kw\n2021-01-01T00:00:00,5,100\n")
    assert run("ingest", "--input", tmp_path / "kw.csv", "--out", tmp_path) == 1


def test_numeric_error_exit_3(pipeline, tmp_path, monkeypatch, capsys):
    d, _ = pipeline

    def boom(*a, **k):
        raise EpochError("too many failed blocks")

    monkeypatch.setattr(cli, "fit_starting_posterior", boom)
    cfg = write_config(tmp_path, data=str(d / "cleaned.csv"))
    assert run("fit-init", "--config", cfg, "--out", tmp_path) == 3
    assert "numeric error" in capsys.readouterr().err


def test_missing_checkpoint_exit_2(tmp_path):
    assert run("monitor", "--out", tmp_path, "--checkpoint", tmp_path / "nope.json") == 2
    (tmp_path / "broken.json").write_text("{not json")
    (tmp_path / "cleaned.csv").write_text("timestamp,wind_speed_ms,power_norm\n")
    assert run("monitor", "--out", tmp_path, "--checkpoint", tmp_path / "broken.json") == 2


def test_uncalibrated_baselines_have_no_alarms(pipeline, tmp_path, caplog):
    d, _ = pipeline
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({**{k: v for k, v in SMALL.items() if k != "calibration_file"},
                                   "data": str(d / "cleaned.csv"), "checkpoint": str(d / "checkpoint.json")}))
    with caplog.at_level(logging.WARNING):
        assert run("baselines", "--config", cfg, "--out", tmp_path, "--skip-init") == 0
    assert "no calibration file" in caplog.text
    reps = json.loads((tmp_path / "baselines.json").read_text())
    assert all(s["alarm"] is None for r in reps.values() for s in r["segments"])
    assert run("evaluate", "--out", tmp_path, "--report", tmp_path / "baselines.json",
               "--labels", d / "labels.csv") == 2
