"""Sequential copula-based variational fit of the I-spline power-curve model.

Model for one data segment with ``N`` records and ``P`` basis columns::

    y_i = Z_i . beta + e_i,          e_i ~ N(0, 1 / tau_i)
    beta_j ~ LN(u_prev_j, s_prev_j),  tau_i ~ Gamma(a0, b0)

Variational family: ``log beta ~ N(u, Sigma_beta)`` (log-normal marginals tied
by a Gaussian copula) and independent ``tau_i ~ LN(c_i, d2_i)``.  Up to an
additive constant the ELBO is::

    J = (a0 + 1/2) sum c - b0 sum <tau> - 1/2 sum <tau_i><r_i^2>
        - sum [(u - u_prev)^2 + sigma2] / (2 s_prev)
        + 1/2 log|Sigma_beta| + 1/2 sum log d2

Each scalar parameter is updated in turn by a bracketed Newton solve of its
stationarity equation, starting from its current value.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import gammaln

from .errors import DomainError, EpochError, NumericError, SolverError
from .spline_basis import SplineBasisSpec, design_matrix

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration and state


@dataclass(frozen=True)
class Bounds:
    """Feasible intervals for the Newton iterates."""

    u: tuple = (-20.0, 20.0)
    sigma2: tuple = (1e-8, 10.0)
    c: tuple = (-20.0, 20.0)
    d2: tuple = (1e-8, 10.0)
    eig_floor: float = 1e-8

    def to_dict(self) -> dict:
        return {"u": list(self.u), "sigma2": list(self.sigma2), "c": list(self.c),
                "d2": list(self.d2), "eig_floor": self.eig_floor}

    @classmethod
    def from_dict(cls, data: dict) -> "Bounds":
        kw = {k: tuple(v) if isinstance(v, (list, tuple)) else float(v) for k, v in data.items()}
        return cls(**kw)


@dataclass(frozen=True)
class HyperParams:
    a0: float = 0.1
    b0: float = 0.1
    maxiter: int = 30
    nr_tol: float = 1e-8
    nr_max_iter: int = 50
    bounds: Bounds = field(default_factory=Bounds)

    def __post_init__(self):
        if not (self.a0 > 0 and self.b0 > 0):
            raise DomainError("a0 and b0 must be positive")
        if self.maxiter < 1 or int(self.maxiter) != self.maxiter:
            raise DomainError("maxiter must be a positive integer")
        if not self.nr_tol > 0:
            raise DomainError("nr_tol must be positive")
        if self.nr_max_iter < 1:
            raise DomainError("nr_max_iter must be >= 1")

    def to_dict(self) -> dict:
        return {"a0": self.a0, "b0": self.b0, "maxiter": self.maxiter, "nr_tol": self.nr_tol,
                "nr_max_iter": self.nr_max_iter, "bounds": self.bounds.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "HyperParams":
        data = dict(data)
        bounds = Bounds.from_dict(data.pop("bounds")) if "bounds" in data else Bounds()
        return cls(bounds=bounds, **data)


def _offdiag_index(p: int):
    return np.triu_indices(p, 1)


@dataclass(frozen=True, eq=False)
class PosteriorState:
    """Variational parameters after segment ``t``.

    ``sigma_offdiag`` holds the strict upper triangle of the log-scale
    covariance, row by row.  ``c`` and ``d2`` are the per-record noise
    precision parameters of the segment that produced the state (empty for a
    state that was never fitted).
    """

    u: np.ndarray
    sigma2: np.ndarray
    sigma_offdiag: np.ndarray
    c: np.ndarray
    d2: np.ndarray
    t: int = 0

    def __post_init__(self):
        u = np.atleast_1d(np.asarray(self.u, dtype=float)).copy()
        s2 = np.atleast_1d(np.asarray(self.sigma2, dtype=float)).copy()
        off = np.atleast_1d(np.asarray(self.sigma_offdiag, dtype=float)).copy()
        c = np.atleast_1d(np.asarray(self.c, dtype=float)).copy()
        d2 = np.atleast_1d(np.asarray(self.d2, dtype=float)).copy()
        p = u.size
        if s2.shape != (p,) or off.shape != (p * (p - 1) // 2,):
            raise DomainError("u, sigma2 and sigma_offdiag sizes disagree")
        if c.shape != d2.shape:
            raise DomainError("c and d2 sizes disagree")
        if np.any(s2 <= 0) or np.any(d2 <= 0):
            raise DomainError("variances must be positive")
        for name, arr in (("u", u), ("sigma2", s2), ("sigma_offdiag", off), ("c", c), ("d2", d2)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "t", int(self.t))

    @property
    def p(self) -> int:
        return self.u.size

    @property
    def cov(self) -> np.ndarray:
        """Log-scale covariance ``Sigma_beta``."""
        p = self.p
        m = np.diag(self.sigma2)
        iu = _offdiag_index(p)
        m[iu] = self.sigma_offdiag
        m[(iu[1], iu[0])] = self.sigma_offdiag
        return m

    @classmethod
    def from_cov(cls, u, cov, c=(), d2=(), t=0) -> "PosteriorState":
        cov = np.asarray(cov, dtype=float)
        iu = _offdiag_index(cov.shape[0])
        return cls(u=u, sigma2=np.diag(cov).copy(), sigma_offdiag=cov[iu], c=c, d2=d2, t=t)

    @classmethod
    def diffuse(cls, p: int, sigma2: float = 1.0) -> "PosteriorState":
        """Independent prior ``u_j = log(1/p)``, ``sigma2_j = sigma2``."""
        return cls(u=np.full(p, math.log(1.0 / p)), sigma2=np.full(p, float(sigma2)),
                   sigma_offdiag=np.zeros(p * (p - 1) // 2), c=(), d2=())

    @property
    def mean_beta(self) -> np.ndarray:
        """Posterior means ``<beta_j> = exp(u_j + sigma2_j / 2)``."""
        return np.exp(self.u + 0.5 * self.sigma2)

    @property
    def beta_cov(self) -> np.ndarray:
        """Linear-scale covariance of ``beta`` under the log-normal posterior."""
        m = self.mean_beta
        return np.outer(m, m) * np.expm1(self.cov)

    def is_valid(self) -> bool:
        try:
            return bool(np.linalg.eigvalsh(self.cov).min() > 0)
        except np.linalg.LinAlgError:
            return False

    def coefficients_equal(self, other: "PosteriorState") -> bool:
        return (np.array_equal(self.u, other.u) and np.array_equal(self.sigma2, other.sigma2)
                and np.array_equal(self.sigma_offdiag, other.sigma_offdiag))

    def with_noise(self, c, d2) -> "PosteriorState":
        return replace(self, c=c, d2=d2)

    def marginal_prior(self) -> "PosteriorState":
        """Same marginals with the dependence dropped."""
        return PosteriorState(self.u, self.sigma2, np.zeros_like(self.sigma_offdiag), (), (), self.t)

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "u": self.u.tolist(),
            "sigma2": self.sigma2.tolist(),
            "sigma_offdiag": self.sigma_offdiag.tolist(),
            "c": self.c.tolist(),
            "d2": self.d2.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PosteriorState":
        return cls(u=data["u"], sigma2=data["sigma2"], sigma_offdiag=data["sigma_offdiag"],
                   c=data.get("c", []), d2=data.get("d2", []), t=data.get("t", 0))


# ---------------------------------------------------------------------------
# Newton-Raphson


@dataclass(frozen=True)
class NewtonResult:
    x: float
    converged: bool
    iterations: int
    residual: float


def _fd_derivative(f, x, fx):
    h = 1e-7 * max(1.0, abs(x))
    return (f(x + h) - fx) / h


def newton_solve(
    residual: Callable[[float], float],
    guess: float,
    bounds=(-math.inf, math.inf),
    tol: float = 1e-8,
    max_iter: int = 50,
    fprime: Optional[Callable[[float], float]] = None,
) -> NewtonResult:
    """Bounded Newton-Raphson for a scalar root.

    Iterates are clamped to ``bounds``.  Whenever two evaluated points have
    residuals of opposite sign the root is bracketed and a Newton step that
    leaves the bracket, or shrinks it more slowly than halving would, is
    replaced by bisection.  Iteration stops when the step is shorter than
    ``tol``; after ``max_iter`` steps the iterate with
    the smallest residual is returned with ``converged=False``.
    """
    lo, hi = float(bounds[0]), float(bounds[1])
    if not lo <= hi:
        raise DomainError(f"empty bounds {bounds!r}")
    deriv = fprime if fprime is not None else (lambda x, _f=residual: _fd_derivative(_f, x, _f(x)))

    def evaluate(x):
        r = residual(x)
        if not math.isfinite(r):
            raise SolverError(f"non-finite residual at x={x!r}")
        return r

    x = min(max(float(guess), lo), hi)
    r = evaluate(x)
    pos = neg = None  # points with r > 0 and r < 0
    if math.isfinite(lo) and math.isfinite(hi) and lo < hi:
        r_lo, r_hi = evaluate(lo), evaluate(hi)
        if r_lo == 0.0:
            return NewtonResult(lo, True, 0, 0.0)
        if r_hi == 0.0:
            return NewtonResult(hi, True, 0, 0.0)
        if (r_lo > 0) != (r_hi > 0):
            pos, neg = (lo, hi) if r_lo > 0 else (hi, lo)
    best_x, best_r = x, abs(r)
    if r == 0.0:
        return NewtonResult(x, True, 0, 0.0)
    dx_prev = math.inf
    for it in range(1, max_iter + 1):
        if r > 0:
            pos = x if pos is None or neg is None or _between(x, pos, neg) else pos
        elif r < 0:
            neg = x if neg is None or pos is None or _between(x, pos, neg) else neg
        d = deriv(x)
        x_new = x - r / d if (d != 0.0 and math.isfinite(d)) else math.nan
        if pos is not None and neg is not None:
            a, b = (pos, neg) if pos < neg else (neg, pos)
            # bisect when Newton leaves the bracket or converges slower than bisection would
            slow = abs(2.0 * r) > abs(dx_prev * d)
            if not (math.isfinite(x_new) and a < x_new < b) or slow:
                x_new = 0.5 * (a + b)
        elif not math.isfinite(x_new):
            raise SolverError(f"zero or non-finite derivative at x={x!r}")
        x_new = min(max(x_new, lo), hi)
        step = abs(x_new - x)
        dx_prev = step
        x = x_new
        r = evaluate(x)
        if abs(r) < best_r:
            best_x, best_r = x, abs(r)
        if step < tol or r == 0.0:
            return NewtonResult(x, True, it, r)
    return NewtonResult(best_x, False, max_iter, best_r)


def _between(x, a, b):
    return min(a, b) <= x <= max(a, b)


def newton_solve_array(residual, fprime, guess, lo, hi, tol=1e-8, max_iter=50):
    """Element-wise Newton for independent, strictly decreasing residuals.

    ``residual`` and ``fprime`` act on whole arrays.  Each element is
    bracketed by its bounds; steps leaving the bracket fall back to
    bisection.  Returns ``(x, converged_mask)``.
    """
    x = np.clip(np.asarray(guess, dtype=float).copy(), lo, hi)
    a = np.broadcast_to(np.asarray(lo, dtype=float), x.shape).copy()
    b = np.broadcast_to(np.asarray(hi, dtype=float), x.shape).copy()
    r_a, r_b = residual(a), residual(b)
    at_lo = r_a <= 0
    at_hi = r_b >= 0
    done = at_lo | at_hi
    x = np.where(at_lo, a, np.where(at_hi, b, x))
    active = ~done
    for _ in range(max_iter):
        if not active.any():
            break
        r = residual(x)
        if not np.all(np.isfinite(r[active])):
            raise SolverError("non-finite residual in vectorised Newton")
        a = np.where(active & (r > 0), x, a)
        b = np.where(active & (r < 0), x, b)
        d = fprime(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_new = x - r / d
        bad = ~np.isfinite(x_new) | (x_new <= a) | (x_new >= b)
        x_new = np.where(bad, 0.5 * (a + b), x_new)
        step = np.abs(x_new - x)
        x = np.where(active, x_new, x)
        active = active & (step >= tol) & (r != 0)
    return x, ~active


# ---------------------------------------------------------------------------
# objective and gradient


def _noise_moments(c, d2):
    return np.exp(c + 0.5 * d2)


def _beta_moments(u, cov):
    m = np.exp(u + 0.5 * np.diag(cov))
    e = np.outer(m, m) * np.exp(cov)
    return m, e


def expected_sq_residuals(state: PosteriorState, Z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``<(y_i - Z_i beta)^2>`` under the log-normal posterior of ``beta``."""
    m, e = _beta_moments(state.u, state.cov)
    return y**2 - 2 * y * (Z @ m) + np.einsum("ij,jk,ik->i", Z, e, Z)


def _check_problem(state, Z, y, prior):
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if Z.shape[0] != y.size:
        raise DomainError("Z and y disagree on the number of records")
    if Z.shape[1] != state.p or prior.p != state.p:
        raise DomainError("coefficient dimension mismatch")
    if state.c.size != y.size:
        raise DomainError("noise blocks must have one entry per record")
    return Z, y


def _logdet(cov):
    sign, ld = np.linalg.slogdet(cov)
    if sign <= 0:
        raise NumericError("Sigma_beta is not positive definite")
    return ld


def elbo(state: PosteriorState, Z, y, prior: PosteriorState, hyper: HyperParams, full: bool = False) -> float:
    """Evidence lower bound of the segment model.

    With ``full=False`` additive constants are dropped; ``full=True`` adds
    them so the value is the exact ELBO (useful for checks against direct
    integration).
    """
    Z, y = _check_problem(state, Z, y, prior)
    a0, b0 = hyper.a0, hyper.b0
    cov = state.cov
    w = _noise_moments(state.c, state.d2)
    r2 = expected_sq_residuals(state, Z, y)
    s0 = prior.sigma2
    val = ((a0 + 0.5) * state.c.sum() - np.sum(w * (b0 + 0.5 * r2))
           - np.sum(((state.u - prior.u) ** 2 + state.sigma2) / (2 * s0))
           + 0.5 * _logdet(cov) + 0.5 * np.log(state.d2).sum())
    if full:
        n, p = y.size, state.p
        val += n * (0.5 + a0 * math.log(b0) - gammaln(a0))
        val += -0.5 * np.sum(np.log(2 * math.pi * s0)) + 0.5 * p * math.log(2 * math.pi * math.e)
    return float(val)


@dataclass(frozen=True)
class Gradient:
    u: np.ndarray
    sigma2: np.ndarray
    sigma_offdiag: np.ndarray
    c: np.ndarray
    d2: np.ndarray

    def max_abs(self) -> float:
        parts = [np.abs(a).max() for a in (self.u, self.sigma2, self.sigma_offdiag, self.c, self.d2) if a.size]
        return float(max(parts)) if parts else 0.0


def gradient(state: PosteriorState, Z, y, prior: PosteriorState, hyper: HyperParams) -> Gradient:
    """Partial derivatives of :func:`elbo` with respect to every parameter.

    The off-diagonal derivative treats ``sigma_jk = sigma_kj`` as a single
    parameter.
    """
    Z, y = _check_problem(state, Z, y, prior)
    cov = state.cov
    m, e = _beta_moments(state.u, cov)
    w = _noise_moments(state.c, state.d2)
    H = (Z * w[:, None]).T @ Z
    bvec = Z.T @ (w * y)
    HE = H * e
    P = np.linalg.inv(cov)
    s0 = prior.sigma2
    du = m * bvec - HE.sum(axis=1) - (state.u - prior.u) / s0
    diagHE = np.diag(HE)
    ds = 0.5 * m * bvec - 0.5 * (HE.sum(axis=1) - diagHE) - diagHE - 0.5 / s0 + 0.5 * np.diag(P)
    iu = _offdiag_index(state.p)
    doff = -HE[iu] + P[iu]
    r2 = expected_sq_residuals(state, Z, y)
    k = hyper.b0 + 0.5 * r2
    dc = (hyper.a0 + 0.5) - w * k
    dd2 = -0.5 * w * k + 0.5 / state.d2
    return Gradient(du, ds, doff, dc, dd2)


# ---------------------------------------------------------------------------
# workspace in cofactor notation (used for cross-checks)


@dataclass(frozen=True)
class NRWorkspace:
    """Coefficient blocks of the coordinate equations.

    ``A`` are cofactors of ``Sigma_beta``; ``B = Z <tau>``; ``C[i, j] =
    sum_{k != j} Z_ik exp(sigma_jk) <beta_k>``; ``Dvec[j] = sum_i Z_ij^2 <tau_i>``;
    ``H = Z' diag<tau> Z``; ``Imat = <beta_j><beta_k>`` (for ``j != k`` this
    equals ``exp(u_j + u_k + (sigma2_j + sigma2_k) / 2)``); and ``a1, a2, a3``
    give ``|Sigma_beta|`` as a quadratic in the ``(j, k)`` entry.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Dvec: np.ndarray
    H: np.ndarray
    Imat: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    a3: np.ndarray


def determinant_quadratic(cov: np.ndarray, j: int, k: int):
    """``(a1, a2, a3)`` with ``|cov(x)| = a1 x^2 + a2 x + a3`` for the symmetric (j, k) entry ``x``."""
    cov = np.asarray(cov, dtype=float)
    x0 = cov[j, k]
    vals = []
    for x in (x0 - 1.0, x0, x0 + 1.0):
        c = cov.copy()
        c[j, k] = c[k, j] = x
        vals.append(np.linalg.det(c))
    # exact for a quadratic: fit through three points
    fm, f0, fp = vals
    a1 = 0.5 * (fp + fm) - f0
    slope = 0.5 * (fp - fm)
    a2 = slope - 2 * a1 * x0
    a3 = f0 - a1 * x0**2 - a2 * x0
    return float(a1), float(a2), float(a3)


def nr_workspace(state: PosteriorState, Z) -> NRWorkspace:
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    cov = state.cov
    p = state.p
    m = state.mean_beta
    w = _noise_moments(state.c, state.d2)
    det = np.linalg.det(cov)
    A = det * np.linalg.inv(cov).T
    B = Z * w[:, None]
    ex = np.exp(cov)
    np.fill_diagonal(ex, 0.0)
    C = Z @ (ex * m[None, :]).T
    Dvec = (Z**2 * w[:, None]).sum(axis=0)
    H = Z.T @ B
    Imat = np.outer(m, m)
    a1 = np.zeros((p, p))
    a2 = np.zeros((p, p))
    a3 = np.zeros((p, p))
    for j in range(p):
        for k in range(j + 1, p):
            a1[j, k], a2[j, k], a3[j, k] = a1[k, j], a2[k, j], a3[k, j] = determinant_quadratic(cov, j, k)
    return NRWorkspace(A, B, C, Dvec, H, Imat, a1, a2, a3)


def printed_residuals(state: PosteriorState, Z, y, prior: PosteriorState):
    """Coefficient-block residuals written with the cofactor notation.

    Returns ``(r_u, r_sigma2, r_offdiag)``; ``r_u`` and ``r_offdiag`` equal the
    ELBO gradient and ``r_sigma2`` equals twice it, so the roots coincide.
    """
    ws = nr_workspace(state, Z)
    y = np.asarray(y, dtype=float)
    u, s = state.u, state.sigma2
    cov = state.cov
    s0 = prior.sigma2
    lin = (ws.B * (y[:, None] - ws.C)).sum(axis=0)
    r_u = lin * np.exp(u + s / 2) - ws.Dvec * np.exp(2 * u + 2 * s) - (u - prior.u) / s0
    denom = np.array([cov[j] @ ws.A[j] for j in range(state.p)])
    r_s = lin * np.exp(u + s / 2) - 2 * ws.Dvec * np.exp(2 * u + 2 * s) - 1 / s0 + np.diag(ws.A) / denom
    iu = _offdiag_index(state.p)
    x = cov[iu]
    a1, a2, a3 = ws.a1[iu], ws.a2[iu], ws.a3[iu]
    r_off = -ws.H[iu] * ws.Imat[iu] * np.exp(x) + 0.5 * (2 * a1 * x + a2) / (a1 * x**2 + a2 * x + a3)
    return r_u, r_s, r_off


# ---------------------------------------------------------------------------
# coordinate ascent


@dataclass
class EpochStats:
    blocks: int = 0
    failed: int = 0
    rejected: int = 0
    projected: bool = False


def _solve_block(residual, fprime, objective, x_old, bounds, hyper, stats):
    """Newton-solve one block and keep whichever of old/new scores higher."""
    stats.blocks += 1
    res = newton_solve(residual, x_old, bounds, hyper.nr_tol, hyper.nr_max_iter, fprime)
    if not res.converged:
        stats.failed += 1
    x_new = res.x
    if x_new == x_old:
        return x_old
    f_old, f_new = objective(x_old), objective(x_new)
    if not (f_new >= f_old) or not math.isfinite(f_new):
        stats.rejected += 1
        return x_old
    return x_new


def _update_inverse_diag(P, j, delta):
    """Inverse after adding ``delta`` to entry (j, j) (Sherman-Morrison)."""
    pj = P[:, j].copy()
    return P - np.outer(pj, pj) * (delta / (1.0 + delta * pj[j]))


def _project_pd(cov, floor):
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() >= floor:
        return cov, False
    vals = np.maximum(vals, floor)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T), True


def _coefficient_block(u, cov, u0, s0, H, bvec, hyper, stats):
    """Update all ``u_j``, then all ``sigma2_j``, then all ``sigma_jk`` in place."""
    p = u.size
    lo_u, hi_u = hyper.bounds.u
    lo_s, hi_s = hyper.bounds.sigma2
    floor = hyper.bounds.eig_floor
    exp = math.exp
    ecov = np.exp(cov)
    m = np.exp(u + 0.5 * np.diag(cov))

    for j in range(p):
        s = cov[j, j]
        a = float(bvec[j] - (H[j] * ecov[j]) @ m + H[j, j] * ecov[j, j] * m[j])
        dj = float(H[j, j])
        u0j, s0j = float(u0[j]), float(s0[j])

        def res(x, a=a, dj=dj, s=s, u0j=u0j, s0j=s0j):
            return a * exp(x + 0.5 * s) - dj * exp(2 * x + 2 * s) - (x - u0j) / s0j

        def der(x, a=a, dj=dj, s=s, s0j=s0j):
            return a * exp(x + 0.5 * s) - 2 * dj * exp(2 * x + 2 * s) - 1.0 / s0j

        def obj(x, a=a, dj=dj, s=s, u0j=u0j, s0j=s0j):
            return a * exp(x + 0.5 * s) - 0.5 * dj * exp(2 * x + 2 * s) - (x - u0j) ** 2 / (2 * s0j)

        u[j] = _solve_block(res, der, obj, float(u[j]), (lo_u, hi_u), hyper, stats)
        m[j] = exp(u[j] + 0.5 * s)

    P = np.linalg.inv(cov)
    for j in range(p):
        s_cur = float(cov[j, j])
        s_min = s_cur - 1.0 / P[j, j]
        a = float(bvec[j] - (H[j] * ecov[j]) @ m + H[j, j] * ecov[j, j] * m[j])
        dj = float(H[j, j])
        uj, s0j = float(u[j]), float(s0[j])
        lo = max(lo_s, s_min + floor)
        if lo >= hi_s:
            stats.blocks += 1
            stats.failed += 1
            continue

        def res(x, a=a, dj=dj, uj=uj, s0j=s0j, s_min=s_min):
            return (0.5 * a * exp(uj + 0.5 * x) - dj * exp(2 * uj + 2 * x)
                    - 0.5 / s0j + 0.5 / (x - s_min))

        def der(x, a=a, dj=dj, uj=uj, s_min=s_min):
            return 0.25 * a * exp(uj + 0.5 * x) - 2 * dj * exp(2 * uj + 2 * x) - 0.5 / (x - s_min) ** 2

        def obj(x, a=a, dj=dj, uj=uj, s0j=s0j, s_min=s_min):
            return (a * exp(uj + 0.5 * x) - 0.5 * dj * exp(2 * uj + 2 * x)
                    - 0.5 * x / s0j + 0.5 * math.log(x - s_min))

        s_new = _solve_block(res, der, obj, min(max(s_cur, lo), hi_s), (lo, hi_s), hyper, stats)
        if s_new != s_cur:
            P = _update_inverse_diag(P, j, s_new - s_cur)
            cov[j, j] = s_new
            ecov[j, j] = exp(s_new)
            m[j] = exp(uj + 0.5 * s_new)

    for j in range(p):
        for k in range(j + 1, p):
            x0 = float(cov[j, k])
            hmm = float(H[j, k] * m[j] * m[k])
            pjk, pjj, pkk = float(P[j, k]), float(P[j, j]), float(P[k, k])
            alpha = pjk * pjk - pjj * pkk  # < 0 for a PD matrix
            root = math.sqrt(pjj * pkk)
            d_lo, d_hi = sorted(((-pjk + root) / alpha, (-pjk - root) / alpha))
            width = d_hi - d_lo
            d_lo += 1e-9 * width
            d_hi -= 1e-9 * width

            def q(d, alpha=alpha, pjk=pjk):
                return alpha * d * d + 2 * pjk * d + 1.0

            def res(x, hmm=hmm, x0=x0, alpha=alpha, pjk=pjk):
                d = x - x0
                return -hmm * exp(x) + (alpha * d + pjk) / q(d)

            def der(x, hmm=hmm, x0=x0, alpha=alpha, pjk=pjk):
                d = x - x0
                qd = q(d)
                dq = 2 * alpha * d + 2 * pjk
                return -hmm * exp(x) + (alpha * qd - (alpha * d + pjk) * dq) / (qd * qd)

            def obj(x, hmm=hmm, x0=x0):
                qd = q(x - x0)
                return -hmm * exp(x) + 0.5 * math.log(qd) if qd > 0 else -math.inf

            x_new = _solve_block(res, der, obj, x0, (x0 + d_lo, x0 + d_hi), hyper, stats)
            if x_new != x0:
                cov[j, k] = cov[k, j] = x_new
                ecov[j, k] = ecov[k, j] = exp(x_new)
                P = np.linalg.inv(cov)

    cov_fixed, projected = _project_pd(cov, floor)
    if projected:
        cov[:] = cov_fixed
        stats.projected = True
    return u, cov


def _noise_block(c, d2, r2, hyper):
    a1 = hyper.a0 + 0.5
    k = hyper.b0 + 0.5 * r2
    lo_c, hi_c = hyper.bounds.c
    lo_d, hi_d = hyper.bounds.d2

    c, _ = newton_solve_array(
        lambda x: a1 - np.exp(x + 0.5 * d2) * k,
        lambda x: -np.exp(x + 0.5 * d2) * k,
        c, lo_c, hi_c, hyper.nr_tol, hyper.nr_max_iter)
    d2, _ = newton_solve_array(
        lambda x: -0.5 * np.exp(c + 0.5 * x) * k + 0.5 / x,
        lambda x: -0.25 * np.exp(c + 0.5 * x) * k - 0.5 / x**2,
        d2, lo_d, hi_d, hyper.nr_tol, hyper.nr_max_iter)
    return c, d2


def coordinate_ascent_epoch(state: PosteriorState, Z, y, prior: PosteriorState, hyper: HyperParams,
                            stats: Optional[EpochStats] = None) -> PosteriorState:
    """One sweep over ``u``, ``sigma2``, ``sigma_jk`` and the noise blocks.

    Raises :class:`EpochError` when more than 10% of the coefficient blocks
    hit the Newton iteration cap.
    """
    Z, y = _check_problem(state, Z, y, prior)
    stats = stats if stats is not None else EpochStats()
    u = state.u.copy()
    cov = state.cov
    w = _noise_moments(state.c, state.d2)
    H = (Z * w[:, None]).T @ Z
    bvec = Z.T @ (w * y)
    u, cov = _coefficient_block(u, cov, prior.u, prior.sigma2, H, bvec, hyper, stats)
    if stats.blocks and stats.failed > 0.1 * stats.blocks:
        raise EpochError(f"{stats.failed} of {stats.blocks} coefficient blocks failed to converge")
    coef = PosteriorState.from_cov(u, cov, state.c, state.d2, state.t)
    if y.size:
        r2 = expected_sq_residuals(coef, Z, y)
        c, d2 = _noise_block(state.c.copy(), state.d2.copy(), r2, hyper)
        coef = coef.with_noise(c, d2)
    return coef


def fresh_noise(n: int, hyper: HyperParams):
    """Per-segment noise initialisation ``c = log(a0 / b0)``, ``d2 = 1``."""
    return np.full(n, math.log(hyper.a0 / hyper.b0)), np.ones(n)


def fit_arrays(prior: PosteriorState, Z, y, hyper: HyperParams, maxiter: Optional[int] = None,
               init: Optional[PosteriorState] = None) -> PosteriorState:
    """Run coordinate-ascent epochs on a prepared design matrix.

    ``init`` warm-starts the coefficient blocks, and also the noise blocks
    when it carries one per record; otherwise the noise blocks start fresh.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n_epochs = hyper.maxiter if maxiter is None else int(maxiter)
    c, d2 = fresh_noise(y.size, hyper)
    start = prior if init is None else init
    if init is not None and init.c.size == y.size:
        c, d2 = init.c, init.d2
    state = PosteriorState(start.u, start.sigma2, start.sigma_offdiag, c, d2, prior.t + 1)
    if y.size == 0:
        return PosteriorState(prior.u, prior.sigma2, np.zeros_like(prior.sigma_offdiag), c, d2, prior.t + 1)
    for _ in range(n_epochs):
        state = coordinate_ascent_epoch(state, Z, y, prior, hyper)
    return state


def fit_segment(prior: PosteriorState, segment, hyper: HyperParams, spec: SplineBasisSpec,
                maxiter: Optional[int] = None) -> PosteriorState:
    """Fit one ``(xs, ys)`` segment starting from, and penalised by, ``prior``.

    The coefficient blocks start at the prior values; the noise blocks are
    re-initialised for the new records.  An empty segment returns the prior
    marginals unchanged.
    """
    xs, ys = segment
    Z = design_matrix(xs, spec)
    return fit_arrays(prior, Z, ys, hyper, maxiter)


def sequential_update(segments: Iterable, init: PosteriorState, hyper: HyperParams,
                      spec: SplineBasisSpec) -> list:
    """Chain :func:`fit_segment` over ``segments``; posterior ``t`` is the prior for ``t + 1``.

    A segment whose fit raises a numerical error is logged and the previous
    posterior is carried forward for it.
    """
    out = []
    prior = init
    for k, seg in enumerate(segments):
        xs, ys = (seg.xs, seg.ys) if hasattr(seg, "xs") else seg
        try:
            post = fit_segment(prior, (xs, ys), hyper, spec)
        except NumericError as exc:
            log.warning("segment %d failed (%s); carrying the prior forward", k, exc)
            post = replace(prior, t=prior.t + 1)
        out.append(post)
        prior = post
    return out


def predict_power(state: PosteriorState, xs, spec: SplineBasisSpec, include_noise: bool = True):
    """Posterior predictive mean and standard deviation of power at ``xs``.

    The mean is ``Z <beta>``.  The variance is ``Z Cov(beta) Z'`` plus, when
    ``include_noise`` is set and the state carries noise blocks, the average
    of ``<1/tau_i> = exp(-c_i + d2_i / 2)``.
    """
    Z = design_matrix(xs, spec)
    mean = Z @ state.mean_beta
    var = np.einsum("ij,jk,ik->i", Z, state.beta_cov, Z)
    if include_noise and state.c.size:
        var = var + float(np.mean(np.exp(-state.c + 0.5 * state.d2)))
    return mean, np.sqrt(np.maximum(var, 0.0))
