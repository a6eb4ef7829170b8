"""SCADA ingestion, outlier removal, normalisation and rolling-window segmentation."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np
from scipy.stats import norm

from .errors import ConfigError, CoverageError, DataFormatError
from .spline_basis import SplineBasisSpec

log = logging.getLogger(__name__)

TIME_COLUMN = "timestamp"
SPEED_COLUMN = "wind_speed_ms"
POWER_COLUMNS = ("power_kw", "power_norm")

# Outlier bins: 80 bins of 0.1 m/s starting at 5 m/s.
BIN_START = 5.0
BIN_WIDTH = 0.1
N_BINS = 80
OUTLIER_QUANTILE = 0.01


@dataclass(frozen=True)
class ScadaRecord:
    timestamp: np.datetime64
    v: float
    p: float


@dataclass(frozen=True, eq=False)
class ScadaTable:
    """Column store of SCADA records.

    ``power_unit`` is ``"kw"`` for raw power and ``"norm"`` once divided by
    rated power.  ``skipped`` counts malformed rows dropped by the parser.
    """

    timestamp: np.ndarray
    v: np.ndarray
    p: np.ndarray
    power_unit: str = "norm"
    skipped: int = 0

    def __post_init__(self):
        ts = np.asarray(self.timestamp, dtype="datetime64[s]")
        v = np.asarray(self.v, dtype=float)
        p = np.asarray(self.p, dtype=float)
        if not (ts.shape == v.shape == p.shape) or v.ndim != 1:
            raise DataFormatError("timestamp, v and p columns must be 1-D and equally long")
        object.__setattr__(self, "timestamp", ts)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "p", p)

    def __len__(self) -> int:
        return self.v.size

    def take(self, index) -> "ScadaTable":
        return ScadaTable(self.timestamp[index], self.v[index], self.p[index], self.power_unit, 0)

    def records(self) -> list:
        return [ScadaRecord(t, float(v), float(p)) for t, v, p in zip(self.timestamp, self.v, self.p)]

    @classmethod
    def from_records(cls, records, power_unit: str = "norm") -> "ScadaTable":
        records = list(records)
        return cls(
            np.array([r.timestamp for r in records], dtype="datetime64[s]"),
            np.array([r.v for r in records], dtype=float),
            np.array([r.p for r in records], dtype=float),
            power_unit,
        )

    @classmethod
    def empty(cls, power_unit: str = "norm") -> "ScadaTable":
        return cls(np.array([], dtype="datetime64[s]"), np.array([]), np.array([]), power_unit)

    def to_csv(self, fh, extra: Optional[dict] = None) -> None:
        """Write the ingest schema (plus optional extra columns) to ``fh``."""
        power_col = "power_kw" if self.power_unit == "kw" else "power_norm"
        extra = extra or {}
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([TIME_COLUMN, SPEED_COLUMN, power_col, *extra])
        cols = list(extra.values())
        for i in range(len(self)):
            row = [str(self.timestamp[i]), repr(float(self.v[i])), repr(float(self.p[i]))]
            row.extend(str(c[i]) for c in cols)
            writer.writerow(row)


def parse_scada(source) -> ScadaTable:
    """Read the CSV ingest schema from a text stream (or string).

    Rows with an unparsable timestamp or non-finite numbers are skipped and
    counted in ``skipped``.  The result is sorted by timestamp (stable).
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.reader(source)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataFormatError("empty input: no header row") from None
    missing = [c for c in (TIME_COLUMN, SPEED_COLUMN) if c not in header]
    power_col = next((c for c in POWER_COLUMNS if c in header), None)
    if power_col is None:
        missing.append(" or ".join(POWER_COLUMNS))
    if missing:
        raise DataFormatError(f"missing required column(s): {', '.join(missing)}")
    it, iv, ip = header.index(TIME_COLUMN), header.index(SPEED_COLUMN), header.index(power_col)
    ts, vs, ps = [], [], []
    skipped = 0
    for row in reader:
        if not row or all(not c.strip() for c in row):
            continue
        try:
            t = np.datetime64(row[it].strip().rstrip("Z"), "s")
            v = float(row[iv])
            p = float(row[ip])
        except (ValueError, IndexError):
            skipped += 1
            continue
        if np.isnat(t) or not (np.isfinite(v) and np.isfinite(p)) or v < 0:
            skipped += 1
            continue
        ts.append(t)
        vs.append(v)
        ps.append(p)
    if skipped:
        log.warning("skipped %d malformed row(s)", skipped)
    ts = np.array(ts, dtype="datetime64[s]")
    order = np.argsort(ts, kind="stable")
    unit = "kw" if power_col == "power_kw" else "norm"
    return ScadaTable(ts[order], np.array(vs)[order], np.array(ps)[order], unit, skipped)


def normalize_power(table: ScadaTable, rated_power: float) -> ScadaTable:
    """Divide power by ``rated_power`` (kW)."""
    if not rated_power > 0:
        raise ConfigError(f"rated power must be positive, got {rated_power!r}")
    return ScadaTable(table.timestamp, table.v, table.p / float(rated_power), "norm", table.skipped)


@dataclass(frozen=True)
class SpeedBin:
    lo: float
    mu: float
    sigma: float
    threshold: float
    count: int


def speed_bin_index(v) -> np.ndarray:
    """Bin number in ``0..79`` for speeds in ``[5, 13)``, else ``-1``."""
    v = np.asarray(v, dtype=float)
    # rounding guards against 5.3 landing in bin 2 through float error
    idx = np.floor(np.round((v - BIN_START) / BIN_WIDTH, 9)).astype(int)
    return np.where((idx >= 0) & (idx < N_BINS), idx, -1)


@dataclass(frozen=True, eq=False)
class OutlierResult:
    kept: ScadaTable
    removed: ScadaTable
    bins: list
    removed_index: np.ndarray


def remove_outliers(table: ScadaTable, direction: str = "below") -> OutlierResult:
    """Drop records whose power lies beyond the 1% quantile of their speed bin.

    Each populated bin with at least two records gets a Gaussian fit of its
    power values; the threshold is ``mu + sigma * z_0.01``.  With
    ``direction="below"`` records under the threshold are removed (shutdown,
    curtailment); ``direction="above"`` removes records above it instead.
    Records outside the binned speed range always pass.
    """
    if direction not in ("below", "above"):
        raise ConfigError(f"direction must be 'below' or 'above', got {direction!r}")
    z = norm.ppf(OUTLIER_QUANTILE)
    idx = speed_bin_index(table.v)
    drop = np.zeros(len(table), dtype=bool)
    bins = []
    for b in range(N_BINS):
        members = np.nonzero(idx == b)[0]
        if members.size < 2:
            continue
        power = table.p[members]
        mu = float(power.mean())
        # identical powers: report sigma exactly 0 rather than rounding noise
        sigma = float(power.std()) if np.ptp(power) > 0 else 0.0
        thr = mu + sigma * z
        bins.append(SpeedBin(BIN_START + b * BIN_WIDTH, mu, sigma, thr, int(members.size)))
        if sigma == 0.0:
            continue
        drop[members] = power < thr if direction == "below" else power > thr
    removed_index = np.nonzero(drop)[0]
    return OutlierResult(table.take(~drop), table.take(drop), bins, removed_index)


def clip_to_boundary(table: ScadaTable, spec: SplineBasisSpec) -> ScadaTable:
    """Drop records whose wind speed lies outside the spline boundary."""
    lo, hi = spec.boundary
    return table.take((table.v >= lo) & (table.v <= hi))


@dataclass(frozen=True)
class WindowSpec:
    n_w: int = 500
    n_u: int = 250

    def __post_init__(self):
        if not (isinstance(self.n_w, (int, np.integer)) and isinstance(self.n_u, (int, np.integer))):
            raise ConfigError("window sizes must be integers")
        if not 1 <= self.n_u <= self.n_w:
            raise ConfigError(f"need 1 <= n_u <= n_w, got n_u={self.n_u}, n_w={self.n_w}")


@dataclass(frozen=True, eq=False)
class Segment:
    index: int
    start: int
    xs: np.ndarray
    ys: np.ndarray

    def __iter__(self):
        return iter((self.xs, self.ys))


def segment_count(n: int, window: WindowSpec) -> int:
    return 0 if n < window.n_w else (n - window.n_w) // window.n_u + 1


@dataclass(frozen=True, eq=False)
class SegmentStream:
    """Lazy sequence of rolling windows ``[k n_u, k n_u + n_w)`` over a table."""

    table: ScadaTable
    window: WindowSpec

    def __len__(self) -> int:
        return segment_count(len(self.table), self.window)

    def bounds(self, k: int):
        start = k * self.window.n_u
        return start, start + self.window.n_w

    def __getitem__(self, k: int) -> Segment:
        n = len(self)
        if k < 0:
            k += n
        if not 0 <= k < n:
            raise IndexError(k)
        a, b = self.bounds(k)
        return Segment(k, a, self.table.v[a:b], self.table.p[a:b])

    def __iter__(self) -> Iterator[Segment]:
        for k in range(len(self)):
            yield self[k]


def segment(table: ScadaTable, window: WindowSpec) -> SegmentStream:
    return SegmentStream(table, window)


def window_labels(record_labels, window: WindowSpec) -> np.ndarray:
    """A window is positive when it holds at least one positive record."""
    lab = np.asarray(record_labels, dtype=bool)
    n = segment_count(lab.size, window)
    return np.array([lab[k * window.n_u: k * window.n_u + window.n_w].any() for k in range(n)], dtype=bool)


def check_coverage(v, spec: SplineBasisSpec, min_count: int = 5) -> None:
    """Require ``min_count`` records in every knot interval of the basis.

    Raises :class:`CoverageError` listing the offending intervals.
    """
    edges = np.concatenate([[spec.boundary[0]], spec.interior_knots, [spec.boundary[1]]])
    v = np.asarray(v, dtype=float)
    counts, _ = np.histogram(v, bins=edges)
    empty = [(float(edges[i]), float(edges[i + 1])) for i in range(len(counts)) if counts[i] < min_count]
    if empty:
        desc = ", ".join(f"[{a:g}, {b:g})" for a, b in empty)
        raise CoverageError(f"fewer than {min_count} records in knot interval(s) {desc}", empty)
