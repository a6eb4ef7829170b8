"""Synthetic SCADA streams with a controlled efficiency drop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError
from .pipeline import ScadaTable
from .spline_basis import SplineBasisSpec, design_matrix

START_TIME = np.datetime64("2020-01-01T00:00:00", "s")
STEP = np.timedelta64(600, "s")


@dataclass(frozen=True)
class CurveParams:
    """Stepwise Weibull-CDF power curve."""

    c: float = 9.0
    k: float = 3.0
    v_cut_in: float = 3.0
    v_rated: float = 14.0

    def __post_init__(self):
        if not (self.c > 0 and self.k > 0):
            raise DomainError("c and k must be positive")
        if not 0 <= self.v_cut_in < self.v_rated:
            raise DomainError("need 0 <= v_cut_in < v_rated")


def true_curve(v, params: CurveParams = CurveParams()) -> np.ndarray:
    """``0`` below cut-in, ``1`` above rated, ``1 - exp(-(v/c)^k)`` between."""
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise DomainError("wind speed must be non-negative")
    mid = 1.0 - np.exp(-((v / params.c) ** params.k))
    return np.where(v < params.v_cut_in, 0.0, np.where(v > params.v_rated, 1.0, mid))


@dataclass(frozen=True)
class WindProcess:
    """Weibull wind speeds truncated to ``[lo, hi]``.

    ``segment_ranges`` optionally cycles a per-block truncation range to
    mimic incomplete coverage.
    """

    shape: float = 2.0
    scale: float = 8.0
    lo: float = 0.0
    hi: float = 25.0
    segment_ranges: Optional[tuple] = None

    def range_for(self, block: int):
        if self.segment_ranges:
            lo, hi = self.segment_ranges[block % len(self.segment_ranges)]
            return max(lo, self.lo), min(hi, self.hi)
        return self.lo, self.hi

    def sample(self, rng: np.random.Generator, n: int, block: int = 0) -> np.ndarray:
        lo, hi = self.range_for(block)
        if not lo < hi:
            raise DomainError(f"empty wind-speed range [{lo}, {hi}]")
        # inverse-CDF sampling restricted to [lo, hi]
        cdf = lambda x: 1.0 - np.exp(-((x / self.scale) ** self.shape))
        u = rng.uniform(cdf(lo), cdf(hi), n)
        return self.scale * (-np.log1p(-u)) ** (1.0 / self.shape)


@dataclass(frozen=True)
class DegradationScenario:
    """Blocks ``k >= tau`` (zero based) are degraded.

    ``drop`` is a relative efficiency loss applied to the whole curve.  A
    per-coefficient shift ``xi`` (subtracted as ``Z xi``) may be given
    instead for stress tests; it needs ``spec``.
    """

    tau: int
    drop: float = 0.1
    noise_sd: float = 0.03
    wind: WindProcess = field(default_factory=WindProcess)
    curve: CurveParams = field(default_factory=CurveParams)
    xi: Optional[tuple] = None
    spec: Optional[SplineBasisSpec] = None

    def __post_init__(self):
        if self.tau < 0:
            raise DomainError("tau must be non-negative")
        if not 0 <= self.drop < 1:
            raise DomainError("drop must lie in [0, 1)")
        if not self.noise_sd >= 0:
            raise DomainError("noise_sd must be non-negative")
        if self.xi is not None:
            if np.any(np.asarray(self.xi) < 0):
                raise DomainError("xi must be non-negative")
            if self.spec is None:
                raise DomainError("a per-coefficient xi needs a spline spec")

    def mean_power(self, v, degraded) -> np.ndarray:
        base = true_curve(v, self.curve)
        degraded = np.asarray(degraded, dtype=bool)
        if self.xi is not None:
            shift = design_matrix(v, self.spec) @ np.asarray(self.xi, dtype=float)
            return np.where(degraded, base - shift, base)
        return np.where(degraded, (1.0 - self.drop) * base, base)


@dataclass(frozen=True, eq=False)
class SyntheticData:
    table: ScadaTable
    degraded: np.ndarray
    block: np.ndarray


def generate_scada(scenario: DegradationScenario, n_segments: int, n_per_segment: int, seed,
                   start_block: int = 0) -> SyntheticData:
    """Draw ``n_segments`` blocks of ``n_per_segment`` records.

    Block numbering starts at ``start_block`` so a continuation stream can
    share a scenario with an earlier warm-up stream.
    """
    if n_segments < 0 or n_per_segment < 0:
        raise DomainError("counts must be non-negative")
    rng = np.random.default_rng(seed)
    vs, blocks = [], []
    for k in range(start_block, start_block + n_segments):
        vs.append(scenario.wind.sample(rng, n_per_segment, k))
        blocks.append(np.full(n_per_segment, k))
    v = np.concatenate(vs) if vs else np.array([])
    block = np.concatenate(blocks) if blocks else np.array([], dtype=int)
    degraded = block >= scenario.tau
    p = scenario.mean_power(v, degraded) + scenario.noise_sd * rng.standard_normal(v.size)
    offset = start_block * n_per_segment
    ts = START_TIME + (np.arange(v.size) + offset) * STEP
    return SyntheticData(ScadaTable(ts, v, p, "norm"), degraded, block)
