"""Command-line entry point.

Commands: ``ingest``, ``fit-init``, ``monitor``, ``calibrate``,
``baselines``, ``simulate`` and ``evaluate``.  Every command accepts
``--config``, ``--seed`` and ``--out``.  Exit codes: 0 success, 1 usage or
configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import baselines as bl
from .config import RunConfig, dump_json, load_config
from .cvi import PosteriorState, sequential_update
from .detection import HypothesisConfig, detect
from .errors import ConfigError, DataFormatError, FitError, NumericError
from .experiment import METHODS, ExperimentConfig, calibrate, fit_starting_posterior
from .metrics import detection_score, first_alarm_delay
from .pipeline import (ScadaTable, WindowSpec, check_coverage, clip_to_boundary, normalize_power,
                       parse_scada, remove_outliers, segment)
from .plots import plot_curves, plot_statistic
from .spline_basis import SplineBasisSpec
from .synth import DegradationScenario, generate_scada

log = logging.getLogger("copulamon")

REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema", "method", "window", "offset", "h", "segments", "first_alarm"],
    "properties": {
        "schema": {"const": "copulamon.report/1"},
        "method": {"type": "string"},
        "window": {
            "type": "object",
            "required": ["n_w", "n_u"],
            "properties": {"n_w": {"type": "integer", "minimum": 1}, "n_u": {"type": "integer", "minimum": 1}},
        },
        "offset": {"type": "integer", "minimum": 0},
        "h": {"type": ["number", "null"]},
        "first_alarm": {"type": ["integer", "null"]},
        "segments": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["t", "start", "end", "statistic", "alarm"],
                "properties": {
                    "t": {"type": "integer"},
                    "start": {"type": "string"},
                    "end": {"type": "string"},
                    "statistic": {"type": ["number", "string"]},
                    "alarm": {"type": ["boolean", "null"]},
                },
            },
        },
    },
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _num(x):
    """JSON-safe float (infinity becomes the string "inf")."""
    x = float(x)
    return x if np.isfinite(x) else ("inf" if x > 0 else "-inf")


def _read_table(path: Path) -> ScadaTable:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            if not fh.read(1):
                log.warning("input %s is empty", path)
                return ScadaTable.empty()
            fh.seek(0)
            return parse_scada(fh)
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc


def _require(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"no {what} given (config key or command-line flag)")
    if not Path(path).exists():
        raise DataFormatError(f"{what} {path} does not exist")
    return Path(path)


def _write_table(table: ScadaTable, path: Path, extra=None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        table.to_csv(fh, extra)


def _load_checkpoint(path: Path):
    data = json.loads(path.read_text(encoding="utf-8"))
    try:
        spec = SplineBasisSpec.from_dict(data["spline"])
        state = PosteriorState.from_dict(data["state"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"malformed checkpoint {path}: {exc}") from exc
    return spec, state, data


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(cfg: RunConfig, out: Path, args) -> int:
    src = _require(args.input or cfg.path("input"), "input file")
    table = _read_table(src)
    if table.power_unit == "kw":
        rated = cfg.get("rated_power")
        if rated is None:
            raise ConfigError("rated_power is required for power_kw input")
        table = normalize_power(table, rated)
    direction = cfg.get("outlier_direction", default="below")
    res = remove_outliers(table, direction)
    kept = clip_to_boundary(res.kept, cfg.spline)
    out_of_range = len(res.kept) - len(kept)
    _write_table(kept, out / "cleaned.csv")
    _write_table(res.removed, out / "outliers.csv", {"reason": [f"bin_{direction}_1pct"] * len(res.removed)})
    summary = {"input": str(src), "records": len(table), "skipped_rows": table.skipped,
               "outliers": len(res.removed), "out_of_range": out_of_range, "kept": len(kept),
               "direction": direction}
    dump_json(summary, out / "ingest.json")
    if len(table) == 0:
        log.warning("no records ingested")
    return 0


def _cleaned(cfg: RunConfig, out: Path, args) -> ScadaTable:
    path = args.data or cfg.path("data") or (out / "cleaned.csv")
    table = _read_table(_require(path, "cleaned data"))
    if table.power_unit == "kw":
        rated = cfg.get("rated_power")
        if rated is None:
            raise ConfigError("rated_power is required for power_kw input")
        table = normalize_power(table, rated)
    return clip_to_boundary(table, cfg.spline)


def cmd_fit_init(cfg: RunConfig, out: Path, args) -> int:
    table = _cleaned(cfg, out, args)
    n = cfg.init_records
    if len(table) < n:
        raise DataFormatError(f"need {n} cleaned records for the starting fit, got {len(table)}")
    init = table.take(slice(0, n))
    check_coverage(init.v, cfg.spline, cfg.min_per_interval)
    state = fit_starting_posterior(init.v, init.p, cfg.spline, cfg.hyper, cfg.init_maxiter)
    state = replace(state, c=[], d2=[])
    d_factor = float(cfg.get("hypothesis", "d_factor", default=0.1))
    hyp = HypothesisConfig.from_posterior(state, d_factor, h=float(cfg.get("hypothesis", "h", default=1.0)))
    dump_json({"spline": cfg.spline.to_dict(), "hyper": cfg.hyper.to_dict(), "n_init": n,
               "state": state.to_dict()}, out / "checkpoint.json")
    dump_json(hyp.to_dict(), out / "hypothesis.json")
    plot_curves([state], cfg.spline, out / "starting_curve.svg", ["starting posterior"])
    return 0


def _threshold(cfg: RunConfig, method: str):
    path = cfg.path("calibration_file")
    if path is None:
        return float(cfg.get("hypothesis", "h", default=1.0)) if method == "cvi" else None
    data = json.loads(_require(path, "calibration file").read_text(encoding="utf-8"))
    return data["thresholds"].get(method)


def _spans(stream) -> list:
    """First and last timestamp of every window."""
    ts = stream.table.timestamp
    return [(str(ts[a]), str(ts[b - 1])) for a, b in (stream.bounds(k) for k in range(len(stream)))]


def _report(method: str, window: WindowSpec, offset: int, h, stats, alarms, spans) -> dict:
    first = next((k for k, a in enumerate(alarms) if a), None)
    return {"schema": "copulamon.report/1", "method": method, "window": {"n_w": window.n_w, "n_u": window.n_u},
            "offset": offset, "h": None if h is None else float(h), "first_alarm": first,
            "segments": [{"t": k, "start": sp[0], "end": sp[1], "statistic": _num(s),
                          "alarm": None if a is None else bool(a)}
                         for k, (s, a, sp) in enumerate(zip(stats, alarms, spans))]}


def _write_segments_csv(report: dict, path: Path) -> None:
    lines = ["t,statistic,alarm"]
    for s in report["segments"]:
        alarm = "" if s["alarm"] is None else str(int(s["alarm"]))
        lines.append(f"{s['t']},{s['statistic']},{alarm}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_monitor(cfg: RunConfig, out: Path, args) -> int:
    ck_path = _require(args.checkpoint or cfg.path("checkpoint") or out / "checkpoint.json", "checkpoint")
    spec, start, ck = _load_checkpoint(ck_path)
    table = _cleaned(cfg, out, args)
    offset = int(ck.get("n_init", 0)) if args.skip_init else 0
    stream = segment(table.take(slice(offset, None)), cfg.window)
    traj = sequential_update(stream, start, cfg.hyper, spec)
    h = _threshold(cfg, "cvi")
    hyp = HypothesisConfig.from_posterior(start, float(cfg.get("hypothesis", "d_factor", default=0.1)), h=h)
    records = detect(traj, hyp) if traj else []
    report = _report("cvi", cfg.window, offset, h, [r.lam for r in records], [r.alarm for r in records],
                     _spans(stream))
    dump_json(report, out / "report.json")
    _write_segments_csv(report, out / "segments.csv")
    dump_json({"trajectory": [s.to_dict() for s in traj]}, out / "trajectory.json")
    plot_statistic(range(len(records)), [r.lam for r in records], h, out / "lambda.svg")
    picks = cfg.get("plots", "curve_segments", default=None)
    if picks is None and traj:
        picks = sorted({0, len(traj) // 2, len(traj) - 1})
    chosen = [traj[k] for k in (picks or []) if 0 <= k < len(traj)]
    plot_curves([start] + chosen, spec, out / "curves.svg", ["start"] + [f"segment {k}" for k in picks or [] if 0 <= k < len(traj)])
    return 0


def _experiment(cfg: RunConfig) -> ExperimentConfig:
    sc = cfg.get("scenario", default={}) or {}
    return ExperimentConfig(
        n_w=cfg.window.n_w, n_u=cfg.window.n_u,
        n_init=int(sc.get("n_init", cfg.init_records)), init_maxiter=cfg.init_maxiter,
        n_blocks=int(sc.get("n_blocks", 41)), tau=int(sc.get("tau", 20)), drop=float(sc.get("drop", 0.1)),
        noise_sd=float(sc.get("noise_sd", 0.03)),
        d_factor=float(cfg.get("hypothesis", "d_factor", default=0.1)),
        arl=float(cfg.get("calibration", "arl", default=200.0)),
    )


def cmd_calibrate(cfg: RunConfig, out: Path, args) -> int:
    exp = _experiment(cfg)
    methods = tuple(cfg.get("calibration", "methods", default=list(METHODS)))
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ConfigError(f"unknown method(s): {', '.join(sorted(unknown))}")
    n_streams = int(cfg.get("calibration", "n_streams", default=25))
    calib, _ = calibrate(exp, n_streams, cfg.seed, cfg.spline, cfg.hyper, methods)
    body = {"alpha": calib.alpha, "arl": exp.arl, "n_values": calib.n_values, "n_streams": n_streams,
            "thresholds": {m: _num(v) for m, v in calib.thresholds.items()},
            "achieved_alpha": calib.achieved, "experiment": exp.to_dict(), "seed": cfg.seed}
    if calib.lwz_reference is not None:
        body["lwz_reference"] = {"mean": calib.lwz_reference.mean.tolist(), "cov": calib.lwz_reference.cov.tolist()}
    dump_json(body, out / "calibration.json")
    return 0


def cmd_baselines(cfg: RunConfig, out: Path, args) -> int:
    ck_path = _require(args.checkpoint or cfg.path("checkpoint") or out / "checkpoint.json", "checkpoint")
    _, _, ck = _load_checkpoint(ck_path)
    table = _cleaned(cfg, out, args)
    n_init = int(ck.get("n_init", cfg.init_records))
    ref_data = table.take(slice(0, n_init))
    offset = n_init if args.skip_init else 0
    stream = segment(table.take(slice(offset, None)), cfg.window)
    calib = None
    cpath = cfg.path("calibration_file")
    if cpath is not None:
        calib = json.loads(_require(cpath, "calibration file").read_text(encoding="utf-8"))
    result = {}
    # LWZ
    params = []
    for s in stream:
        try:
            params.append(bl.fit_wcdf((s.xs, s.ys)))
        except FitError:
            params.append(None)
    if calib and "lwz_reference" in calib:
        ref = bl.HotellingReference(np.array(calib["lwz_reference"]["mean"]), np.array(calib["lwz_reference"]["cov"]))
    else:
        ref_windows = segment(ref_data, cfg.window)
        ref = bl.HotellingReference.from_params([bl.fit_wcdf((s.xs, s.ys)) for s in ref_windows])
    # a window whose WCDF fit fails counts as out of control
    result["lwz"] = np.array([np.inf if q is None else bl.hotelling_t2([q], ref.mean, ref.cov)[0] for q in params])
    # GPR
    half = len(ref_data) // 2
    profiles = [(ref_data.v[:half], ref_data.p[:half]), (ref_data.v[half:], ref_data.p[half:])]
    gh = bl.gpr_grid_search(profiles[0])
    gref = bl.GprReference(tuple(bl.gpr_fit(p, gh) for p in profiles))
    result["gpr"] = np.array([bl.gpr_t2(gref, (s.xs, s.ys)) for s in stream])
    # LLR
    llr_cfg = bl.LlrConfig.from_reference((ref_data.v, ref_data.p))
    result["llr"] = np.array([bl.llr_glr((s.xs, s.ys), llr_cfg) for s in stream])
    reports = {}
    for m, stats in result.items():
        h = None if calib is None else calib["thresholds"].get(m)
        h = None if h is None else float(h)
        alarms = [None] * len(stats) if h is None else list(stats > h)
        rep = _report(m, cfg.window, offset, h, stats, alarms, _spans(stream))
        reports[m] = rep
        _write_segments_csv(rep, out / f"baseline_{m}.csv")
        plot_statistic(range(len(stats)), stats, h, out / f"baseline_{m}.svg", label=m.upper())
    if calib is None:
        log.warning("no calibration file: baseline statistics reported without alarms")
    dump_json(reports, out / "baselines.json")
    return 0


def cmd_simulate(cfg: RunConfig, out: Path, args) -> int:
    exp = _experiment(cfg)
    wind = cfg.wind()
    curve = cfg.curve()
    n_pre = exp.n_init // exp.n_u
    scenario = DegradationScenario(tau=n_pre + exp.tau, drop=exp.drop, noise_sd=exp.noise_sd, wind=wind, curve=curve)
    data = generate_scada(scenario, n_pre + exp.n_blocks, exp.n_u, cfg.seed)
    _write_table(data.table, out / "scada.csv")
    lines = ["timestamp,block,degraded"]
    for ts, b, d in zip(data.table.timestamp, data.block, data.degraded):
        lines.append(f"{ts},{b},{int(d)}")
    (out / "labels.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    dump_json({"experiment": exp.to_dict(), "seed": cfg.seed, "records": len(data.table),
               "first_degraded_block": n_pre + exp.tau}, out / "scenario.json")
    return 0


def _read_labels(path: Path):
    """Timestamps and degraded flags from a labels CSV."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return np.array([], dtype="datetime64[s]"), np.array([], dtype=bool)
    missing = [c for c in ("timestamp", "degraded") if c not in rows[0]]
    if missing:
        raise DataFormatError(f"{path}: missing required column(s) {', '.join(missing)}")
    try:
        ts = np.array([r["timestamp"] for r in rows], dtype="datetime64[s]")
        lab = np.array([int(r["degraded"]) for r in rows], dtype=bool)
    except (ValueError, TypeError) as exc:
        raise DataFormatError(f"{path}: malformed labels: {exc}") from exc
    order = np.argsort(ts, kind="stable")
    return ts[order], lab[order]


def cmd_evaluate(cfg: RunConfig, out: Path, args) -> int:
    rep_path = _require(args.report or cfg.path("report") or out / "report.json", "report")
    lab_path = _require(args.labels or cfg.path("labels"), "labels file")
    loaded = json.loads(rep_path.read_text(encoding="utf-8"))
    reports = {loaded["method"]: loaded} if "schema" in loaded else loaded
    ts, lab = _read_labels(lab_path)
    # prefix counts give the number of degraded records inside each window span
    cum = np.concatenate([[0], np.cumsum(lab)])
    scores = {}
    for m, rep in reports.items():
        segs = rep["segments"]
        if any(s["alarm"] is None for s in segs):
            raise DataFormatError(f"{m}: report has no alarms (threshold missing)")
        start = np.array([s["start"] for s in segs], dtype="datetime64[s]")
        end = np.array([s["end"] for s in segs], dtype="datetime64[s]")
        lo = np.searchsorted(ts, start, side="left")
        hi = np.searchsorted(ts, end, side="right")
        truth = (cum[hi] - cum[lo]) > 0
        alarms = np.array([bool(s["alarm"]) for s in segs], dtype=bool)
        score = detection_score(alarms, truth)
        scores[m] = {**score.to_dict(), "first_alarm_delay": first_alarm_delay(alarms, truth)}
    dump_json(scores, out / "evaluation.json")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "fit-init": cmd_fit_init,
    "monitor": cmd_monitor,
    "calibrate": cmd_calibrate,
    "baselines": cmd_baselines,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="copulamon", description="Sequential power-curve monitoring")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "ingest":
            p.add_argument("--input")
        if name in ("fit-init", "monitor", "baselines"):
            p.add_argument("--data", help="cleaned CSV (default OUT/cleaned.csv)")
        if name in ("monitor", "baselines"):
            p.add_argument("--checkpoint")
            p.add_argument("--skip-init", action="store_true",
                           help="start monitoring after the records used by fit-init")
        if name == "evaluate":
            p.add_argument("--report")
            p.add_argument("--labels")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except json.JSONDecodeError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
