"""Run configuration read from YAML or JSON.

Top-level keys (all optional unless a command needs them)::

    input: raw SCADA csv                 rated_power: kW (for power_kw input)
    outlier_direction: below | above     data: cleaned csv
    checkpoint: starting posterior json  report: monitor report json
    labels: per-record labels csv        calibration_file: calibration json
    spline: {interior_knots, boundary, order}
    hyper: {a0, b0, maxiter, nr_tol, nr_max_iter}
    window: {n_w, n_u}
    init: {n_records, maxiter, min_per_interval}
    hypothesis: {d_factor, h}
    calibration: {arl, n_streams, methods}
    scenario: {n_init, n_blocks, tau, drop, noise_sd, wind: {...}, curve: {...}}
    plots: {curve_segments: [..]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .cvi import HyperParams
from .errors import ConfigError, DomainError
from .pipeline import WindowSpec
from .spline_basis import SplineBasisSpec
from .synth import CurveParams, WindProcess

KNOWN_KEYS = {
    "input", "rated_power", "outlier_direction", "data", "checkpoint", "report", "labels",
    "calibration_file", "spline", "hyper", "window", "init", "hypothesis", "calibration",
    "scenario", "plots", "seed",
}


@dataclass
class RunConfig:
    raw: dict = field(default_factory=dict)
    base_dir: Path = Path(".")
    spline: SplineBasisSpec = field(default_factory=SplineBasisSpec)
    hyper: HyperParams = field(default_factory=HyperParams)
    window: WindowSpec = field(default_factory=WindowSpec)
    seed: int = 0

    def get(self, *keys, default=None):
        node = self.raw
        for k in keys:
            if not isinstance(node, dict) or k not in node or node[k] is None:
                return default
            node = node[k]
        return node

    def path(self, key: str, default: Optional[Path] = None) -> Optional[Path]:
        val = self.raw.get(key)
        if val is None:
            return default
        p = Path(val)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def init_records(self) -> int:
        return int(self.get("init", "n_records", default=1000))

    @property
    def init_maxiter(self) -> int:
        return int(self.get("init", "maxiter", default=300))

    @property
    def min_per_interval(self) -> int:
        return int(self.get("init", "min_per_interval", default=5))

    def wind(self) -> WindProcess:
        w = dict(self.get("scenario", "wind", default={}))
        if "segment_ranges" in w and w["segment_ranges"] is not None:
            w["segment_ranges"] = tuple(tuple(r) for r in w["segment_ranges"])
        return WindProcess(**w)

    def curve(self) -> CurveParams:
        return CurveParams(**self.get("scenario", "curve", default={}))


def _build(raw: dict, base_dir: Path, seed: Optional[int]) -> RunConfig:
    unknown = set(raw) - KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    try:
        spline = SplineBasisSpec.from_dict({**SplineBasisSpec().to_dict(), **(raw.get("spline") or {})})
        hyper = HyperParams.from_dict({**HyperParams().to_dict(), **(raw.get("hyper") or {})})
        win = raw.get("window") or {}
        window = WindowSpec(int(win.get("n_w", 500)), int(win.get("n_u", win.get("n_w", 500) // 2)))
    except (DomainError, TypeError, KeyError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    cfg = RunConfig(raw, base_dir, spline, hyper, window, int(seed if seed is not None else raw.get("seed", 0)))
    rp = raw.get("rated_power")
    if rp is not None and not (isinstance(rp, (int, float)) and rp > 0):
        raise ConfigError(f"rated_power must be a positive number, got {rp!r}")
    return cfg


def load_config(path: Optional[str], seed: Optional[int] = None) -> RunConfig:
    if path is None:
        return _build({}, Path("."), seed)
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        raw = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    return _build(raw, p.parent, seed)


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
