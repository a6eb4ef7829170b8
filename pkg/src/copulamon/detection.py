"""Directional degradation detection on the coefficient posterior.

The chart statistic compares the current log-scale posterior ``N(mu, S)``
with an in-control reference ``(u0, Sigma0)`` and a degraded reference
``(u0 - d, Sigma1)``::

    Lambda = KF(mu, S; u0, Sigma0) / KF(mu, S; u0 - d, Sigma1)
    KF(mu, S; m, V) = (mu - m)' V^-1 (mu - m) + log(|V| / |S|) + tr(V^-1 S) - K

``KF`` is twice the Gaussian KL divergence, so the ratio equals the ratio of
the KL divergences between the corresponding log-normal laws.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .cvi import PosteriorState
from .errors import CalibrationError, DomainError, NumericError

log = logging.getLogger(__name__)

DENOM_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class HypothesisConfig:
    u0: np.ndarray
    sigma0: np.ndarray
    d: np.ndarray
    sigma1: np.ndarray
    h: float = 1.0

    def __post_init__(self):
        u0 = np.atleast_1d(np.asarray(self.u0, dtype=float))
        k = u0.size
        s0 = np.asarray(self.sigma0, dtype=float).reshape(k, k)
        s1 = np.asarray(self.sigma1, dtype=float).reshape(k, k)
        d = np.broadcast_to(np.asarray(self.d, dtype=float), (k,)).copy()
        if np.any(d < 0):
            raise DomainError("shift d must be non-negative")
        if not self.h > 0:
            raise DomainError("threshold h must be positive")
        for name, m in (("sigma0", s0), ("sigma1", s1)):
            if not np.allclose(m, m.T) or np.linalg.eigvalsh(m).min() <= 0:
                raise DomainError(f"{name} must be symmetric positive definite")
        object.__setattr__(self, "u0", u0)
        object.__setattr__(self, "sigma0", s0)
        object.__setattr__(self, "sigma1", s1)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "h", float(self.h))

    @property
    def K(self) -> int:
        return self.u0.size

    @classmethod
    def from_posterior(cls, state: PosteriorState, d_factor: float = 0.1, sigma1=None,
                       h: float = 1.0) -> "HypothesisConfig":
        """In-control reference taken from a starting posterior.

        ``d = d_factor * u0``; when some ``u0_j`` are not positive this falls
        back to ``d_factor * |u0|`` and logs it.
        """
        u0 = np.asarray(state.u, dtype=float)
        d = d_factor * u0
        if np.any(u0 <= 0):
            log.info("u0 has non-positive entries; using d = %g * |u0|", d_factor)
            d = d_factor * np.abs(u0)
        cov = state.cov
        return cls(u0, cov, d, cov if sigma1 is None else sigma1, h)

    def with_threshold(self, h: float) -> "HypothesisConfig":
        return HypothesisConfig(self.u0, self.sigma0, self.d, self.sigma1, h)

    def to_dict(self) -> dict:
        return {"u0": self.u0.tolist(), "sigma0": self.sigma0.tolist(), "d": self.d.tolist(),
                "sigma1": self.sigma1.tolist(), "h": self.h}

    @classmethod
    def from_dict(cls, data: dict) -> "HypothesisConfig":
        return cls(data["u0"], data["sigma0"], data["d"], data["sigma1"], data.get("h", 1.0))


@dataclass(frozen=True)
class DetectionRecord:
    t: int
    lam: float
    alarm: bool


def kl_form(mu, cov, m, v) -> float:
    """``(mu-m)' V^-1 (mu-m) + log(|V|/|S|) + tr(V^-1 S) - K`` (twice the Gaussian KL)."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    m = np.atleast_1d(np.asarray(m, dtype=float))
    k = mu.size
    cov = np.asarray(cov, dtype=float).reshape(k, k)
    v = np.asarray(v, dtype=float).reshape(k, k)
    try:
        lv = np.linalg.cholesky(v)
    except np.linalg.LinAlgError:
        raise NumericError("reference covariance is not positive definite") from None
    sign, logdet_s = np.linalg.slogdet(cov)
    if sign <= 0:
        raise NumericError("posterior covariance is not positive definite")
    diff = np.linalg.solve(lv, mu - m)
    vinv_s = np.linalg.solve(lv.T, np.linalg.solve(lv, cov))
    logdet_v = 2.0 * np.log(np.diag(lv)).sum()
    val = diff @ diff + logdet_v - logdet_s + np.trace(vinv_s) - k
    return float(max(val, 0.0))


def klf_from_moments(mu, cov, hyp: HypothesisConfig) -> float:
    num = kl_form(mu, cov, hyp.u0, hyp.sigma0)
    den = kl_form(mu, cov, hyp.u0 - hyp.d, hyp.sigma1)
    if den < DENOM_FLOOR:
        return math.inf
    return num / den


def klf_statistic(state: PosteriorState, hyp: HypothesisConfig) -> float:
    """``Lambda_n`` for a posterior state; ``inf`` when the denominator vanishes."""
    if state.p != hyp.K:
        raise DomainError(f"posterior has {state.p} coefficients, hypothesis has {hyp.K}")
    return klf_from_moments(state.u, state.cov, hyp)


def detect(trajectory: Sequence[PosteriorState], hyp: HypothesisConfig) -> list:
    """One record per posterior; alarm exactly when ``Lambda > h``."""
    if len(trajectory) == 0:
        raise DomainError("empty trajectory")
    out = []
    for k, state in enumerate(trajectory):
        lam = klf_statistic(state, hyp)
        out.append(DetectionRecord(state.t if state.t else k + 1, lam, bool(lam > hyp.h)))
    return out


@dataclass(frozen=True)
class CalibrationResult:
    h: float
    alpha: float
    achieved_alpha: float
    mc_se: float
    n_values: int
    lam_min: float
    lam_max: float


def threshold_from_values(values, alpha: float) -> CalibrationResult:
    """``(1 - alpha)`` empirical quantile of pooled in-control statistics.

    ``h`` is the order statistic with exactly ``floor(alpha * n)`` values
    above it (ties aside), so the achieved rate is the largest one not
    exceeding ``alpha``.  ``alpha = 0`` returns the next float above the
    largest value.
    """
    lam = np.asarray(values, dtype=float).ravel()
    if lam.size == 0:
        raise CalibrationError("no simulated values")
    if not 0 <= alpha < 1:
        raise CalibrationError(f"alpha must lie in [0, 1), got {alpha!r}")
    finite = lam[np.isfinite(lam)]
    lo = float(finite.min()) if finite.size else math.inf
    hi = float(lam.max())
    if alpha == 0:
        if not math.isfinite(hi):
            raise CalibrationError(f"simulated values unbounded (range {lo}..{hi})")
        h = float(np.nextafter(hi, math.inf))
    else:
        m = int(math.floor(alpha * lam.size + 1e-9))
        h = float(np.sort(lam)[lam.size - 1 - m])
        if not math.isfinite(h):
            raise CalibrationError(f"(1 - alpha) quantile is infinite (range {lo}..{hi})")
    if h <= 0:
        h = float(np.nextafter(0.0, 1.0))
    achieved = float(np.mean(lam > h))
    se = math.sqrt(max(achieved * (1 - achieved), 1e-300) / lam.size)
    return CalibrationResult(h, float(alpha), achieved, se, int(lam.size), lo, hi)


def calibrate_threshold(hyp_template: HypothesisConfig, in_control_simulator: Callable,
                        alpha: Optional[float] = None, arl: Optional[float] = None,
                        n_mc: int = 500, seed: int = 0) -> CalibrationResult:
    """Monte Carlo threshold for a false-alarm rate or an in-control ARL.

    ``in_control_simulator(rng)`` returns one in-control trajectory (a list
    of posterior states).  Trajectories are drawn until at least ``n_mc``
    statistics are pooled; an ARL target is converted with
    ``alpha = 1 / ARL``.
    """
    if (alpha is None) == (arl is None):
        raise CalibrationError("give exactly one of alpha or arl")
    if n_mc < 500:
        raise CalibrationError("n_mc must be at least 500")
    if arl is not None:
        if not arl >= 1:
            raise CalibrationError("ARL must be at least 1")
        alpha = 1.0 / arl
    rng = np.random.default_rng(seed)
    values = []
    while len(values) < n_mc:
        traj = in_control_simulator(rng)
        if not traj:
            raise CalibrationError("simulator returned an empty trajectory")
        values.extend(klf_statistic(s, hyp_template) for s in traj)
    return threshold_from_values(values, alpha)


def run_lengths(alarms_per_run) -> np.ndarray:
    """Index (1-based) of the first alarm in each run; runs without alarms give their length + 1."""
    out = []
    for alarms in alarms_per_run:
        alarms = np.asarray(alarms, dtype=bool)
        hit = np.nonzero(alarms)[0]
        out.append(hit[0] + 1 if hit.size else alarms.size + 1)
    return np.asarray(out)
