"""Detection baselines: WCDF + Hotelling T^2 (LWZ), GPR T^2 and local-linear GLR (LLR)."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import least_squares

from .errors import DomainError, FitError, NumericError

# ---------------------------------------------------------------------------
# LWZ


@dataclass(frozen=True)
class WcdfParams:
    c: float
    k: float

    def __post_init__(self):
        if not (self.c > 0 and self.k > 0):
            raise DomainError("WCDF parameters must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.c, self.k])


def wcdf(v, params: WcdfParams, v_cut_in: float = 3.0, v_rated: float = 14.0) -> np.ndarray:
    """Stepwise WCDF: 0 below cut-in, 1 above rated."""
    v = np.asarray(v, dtype=float)
    mid = 1.0 - np.exp(-((np.maximum(v, 0.0) / params.c) ** params.k))
    return np.where(v < v_cut_in, 0.0, np.where(v > v_rated, 1.0, mid))


def fit_wcdf(segment, v_cut_in: float = 3.0, v_rated: float = 14.0, guess=(8.0, 2.0)) -> WcdfParams:
    """Least-squares ``(c, k)`` on records strictly between cut-in and rated speed.

    Levenberg-Marquardt on ``log c, log k`` keeps both parameters positive.
    """
    xs, ys = (np.asarray(a, dtype=float) for a in segment)
    inside = (xs > v_cut_in) & (xs < v_rated)
    x, y = xs[inside], ys[inside]
    if x.size < 10:
        raise FitError(f"need at least 10 records between cut-in and rated speed, got {x.size}")

    def resid(theta):
        c, k = np.exp(theta)
        return 1.0 - np.exp(-((x / c) ** k)) - y

    sol = least_squares(resid, np.log(guess), method="lm", xtol=1e-12, ftol=1e-12, gtol=1e-12)
    if not sol.success or not np.all(np.isfinite(sol.x)):
        raise FitError(f"WCDF fit did not converge: {sol.message}")
    c, k = np.exp(sol.x)
    return WcdfParams(float(c), float(k))


def hotelling_t2(params: Sequence, reference_mean, reference_cov) -> np.ndarray:
    """``T^2_t = (theta_t - mean)' S^-1 (theta_t - mean)`` for each parameter vector."""
    theta = np.array([p.as_array() if isinstance(p, WcdfParams) else np.atleast_1d(p) for p in params], dtype=float)
    mean = np.atleast_1d(np.asarray(reference_mean, dtype=float))
    cov = np.atleast_2d(np.asarray(reference_cov, dtype=float))
    if theta.size == 0:
        return np.array([])
    try:
        cf = cho_factor(cov)
    except np.linalg.LinAlgError:
        raise NumericError("reference covariance is singular") from None
    diff = theta - mean
    return np.einsum("ij,ij->i", diff, cho_solve(cf, diff.T).T)


@dataclass(frozen=True, eq=False)
class HotellingReference:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_params(cls, params: Sequence[WcdfParams]) -> "HotellingReference":
        theta = np.array([p.as_array() for p in params])
        if theta.shape[0] < 3:
            raise DomainError("need at least three in-control parameter vectors")
        return cls(theta.mean(axis=0), np.cov(theta, rowvar=False))


# ---------------------------------------------------------------------------
# GPR


@dataclass(frozen=True)
class GprHyper:
    length: float = 2.0
    amplitude: float = 0.5
    noise: float = 1e-3  # noise variance

    def __post_init__(self):
        if not (self.length > 0 and self.amplitude > 0 and self.noise > 0):
            raise DomainError("GPR hyperparameters must be positive")


def rbf_kernel(a, b, hyper: GprHyper) -> np.ndarray:
    a = np.asarray(a, dtype=float)[:, None]
    b = np.asarray(b, dtype=float)[None, :]
    return hyper.amplitude**2 * np.exp(-0.5 * ((a - b) / hyper.length) ** 2)


@dataclass(frozen=True, eq=False)
class GprModel:
    x: np.ndarray
    y: np.ndarray
    hyper: GprHyper
    chol: tuple
    alpha: np.ndarray

    def predict(self, xq, full_cov: bool = True):
        """Predictive mean and covariance of the latent function at ``xq``."""
        xq = np.asarray(xq, dtype=float)
        ks = rbf_kernel(xq, self.x, self.hyper)
        mean = ks @ self.alpha
        v = cho_solve(self.chol, ks.T)
        if full_cov:
            cov = rbf_kernel(xq, xq, self.hyper) - ks @ v
            return mean, 0.5 * (cov + cov.T)
        var = self.hyper.amplitude**2 - np.einsum("ij,ji->i", ks, v)
        return mean, np.maximum(var, 0.0)

    def log_marginal_likelihood(self) -> float:
        c, _ = self.chol
        return float(-0.5 * self.y @ self.alpha - np.log(np.diag(c)).sum() - 0.5 * self.y.size * math.log(2 * math.pi))


def _chol_with_jitter(k):
    try:
        return cho_factor(k, lower=True)
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-8 * max(float(np.mean(np.diag(k))), 1e-12)
    try:
        return cho_factor(k + jitter * np.eye(k.shape[0]), lower=True)
    except np.linalg.LinAlgError:
        raise NumericError("Gram matrix is not positive definite even with jitter") from None


def gpr_fit(segment, hyper: GprHyper = GprHyper()) -> GprModel:
    """Zero-mean GP with RBF kernel and Gaussian noise."""
    x, y = (np.asarray(a, dtype=float).ravel() for a in segment)
    if x.size == 0:
        raise DomainError("cannot fit a GP to an empty segment")
    k = rbf_kernel(x, x, hyper) + hyper.noise * np.eye(x.size)
    chol = _chol_with_jitter(k)
    alpha = cho_solve(chol, y)
    return GprModel(x, y, hyper, chol, alpha)


DEFAULT_GPR_GRID = {
    "length": (0.5, 1.0, 2.0, 4.0),
    "amplitude": (0.3, 0.6, 1.0),
    "noise": (1e-4, 3e-4, 1e-3, 3e-3, 1e-2),
}


def gpr_grid_search(segment, grid: Optional[dict] = None) -> GprHyper:
    """Hyperparameters maximising the log marginal likelihood over a grid."""
    grid = grid or DEFAULT_GPR_GRID
    best, best_val = None, -math.inf
    for length, amp, noise in itertools.product(grid["length"], grid["amplitude"], grid["noise"]):
        h = GprHyper(length, amp, noise)
        try:
            val = gpr_fit(segment, h).log_marginal_likelihood()
        except NumericError:
            continue
        if val > best_val:
            best, best_val = h, val
    if best is None:
        raise NumericError("no grid point gave a usable GP")
    return best


@dataclass(frozen=True, eq=False)
class GprReference:
    """In-control profiles whose predictions are pooled at new design points."""

    models: tuple

    def predict(self, xq):
        """Average predictive mean and covariance over the in-control profiles, plus noise."""
        means, covs = zip(*(m.predict(xq) for m in self.models))
        mean = np.mean(means, axis=0)
        cov = np.mean(covs, axis=0) + np.mean([m.hyper.noise for m in self.models]) * np.eye(len(mean))
        return mean, cov


def gpr_t2(reference: GprReference, segment) -> float:
    """``(y - y*)' Sigma*^-1 (y - y*)`` with pooled in-control predictions."""
    x, y = (np.asarray(a, dtype=float).ravel() for a in segment)
    mean, cov = reference.predict(x)
    chol = _chol_with_jitter(cov)
    r = y - mean
    return float(r @ cho_solve(chol, r))


# ---------------------------------------------------------------------------
# LLR


def local_linear(x_eval, x, y, bandwidth: float, max_widen: int = 10) -> np.ndarray:
    """Local linear smoother with a Gaussian kernel.

    Points whose local design is degenerate get their bandwidth doubled until
    the fit is defined.
    """
    x_eval = np.asarray(x_eval, dtype=float).ravel()
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size < 2:
        raise DomainError("need at least two points for a local linear fit")
    out = np.empty(x_eval.size)
    todo = np.arange(x_eval.size)
    bw = float(bandwidth)
    for _ in range(max_widen + 1):
        d = x[None, :] - x_eval[todo, None]
        w = np.exp(-0.5 * (d / bw) ** 2)
        s0 = w.sum(axis=1)
        s1 = (w * d).sum(axis=1)
        s2 = (w * d * d).sum(axis=1)
        t0 = w @ y
        t1 = (w * d) @ y
        det = s0 * s2 - s1 * s1
        ok = det > 1e-10 * np.maximum(s0 * s2, 1e-300)
        out[todo[ok]] = (s2[ok] * t0[ok] - s1[ok] * t1[ok]) / det[ok]
        todo = todo[~ok]
        if todo.size == 0:
            return out
        bw *= 2.0
    raise NumericError("local linear fit undefined even after widening the bandwidth")


@dataclass(frozen=True, eq=False)
class LlrConfig:
    grid: np.ndarray
    g0: np.ndarray
    sigma0_sq: float
    bandwidth: float = 1.0

    def __post_init__(self):
        if not self.sigma0_sq > 0:
            raise DomainError("sigma0_sq must be positive")
        if not self.bandwidth > 0:
            raise DomainError("bandwidth must be positive")
        object.__setattr__(self, "grid", np.asarray(self.grid, dtype=float))
        object.__setattr__(self, "g0", np.asarray(self.g0, dtype=float))

    def g0_at(self, x) -> np.ndarray:
        return np.interp(x, self.grid, self.g0)

    @classmethod
    def from_reference(cls, segment, bandwidth: float = 1.0, grid=None) -> "LlrConfig":
        """Phase-I estimate: smoother on in-control data, residual variance as ``sigma0_sq``."""
        x, y = (np.asarray(a, dtype=float).ravel() for a in segment)
        grid = np.linspace(0.0, 25.0, 251) if grid is None else np.asarray(grid, dtype=float)
        g0 = local_linear(grid, x, y, bandwidth)
        resid = y - np.interp(x, grid, g0)
        return cls(grid, g0, float(np.mean(resid**2)), bandwidth)


def llr_glr(segment, config: LlrConfig) -> float:
    """``lr = [sum (y - g0)^2 - sum (y - g_hat)^2] / sigma0^2``."""
    x, y = (np.asarray(a, dtype=float).ravel() for a in segment)
    g_hat = local_linear(x, x, y, config.bandwidth)
    return float((np.sum((y - config.g0_at(x)) ** 2) - np.sum((y - g_hat) ** 2)) / config.sigma0_sq)
