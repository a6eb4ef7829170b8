"""Variational regression with a multivariate Gaussian proposal (MGR).

Same I-spline likelihood as the copula model, but ``q(beta)`` is a full
Gaussian ``N(mu, Sigma)`` and each noise precision has a Gamma factor
``G(a_i, b_i)``.  All three blocks have closed-form updates::

    Sigma = (Sigma0^-1 + Z' diag<s> Z)^-1
    mu    = Sigma (Z' diag<s> y + Sigma0^-1 mu0)
    a_i   = a0 + 1/2,   b_i = b0 + <(y_i - Z_i beta)^2> / 2

with ``<s_i> = a_i / b_i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy.special import digamma, gammaln, polygamma

from .cvi import HyperParams, PosteriorState
from .errors import DomainError, NumericError
from .spline_basis import SplineBasisSpec, design_matrix


@dataclass(frozen=True, eq=False)
class MgrPosterior:
    mu_beta: np.ndarray
    sigma_beta: np.ndarray
    a: np.ndarray
    b: np.ndarray
    t: int = 0

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu_beta, dtype=float)).copy()
        cov = np.asarray(self.sigma_beta, dtype=float).reshape(mu.size, mu.size).copy()
        a = np.atleast_1d(np.asarray(self.a, dtype=float)).copy()
        b = np.atleast_1d(np.asarray(self.b, dtype=float)).copy()
        if a.shape != b.shape or np.any(a <= 0) or np.any(b <= 0):
            raise DomainError("a and b must be positive and equally long")
        for name, arr in (("mu_beta", mu), ("sigma_beta", cov), ("a", a), ("b", b)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def p(self) -> int:
        return self.mu_beta.size

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.diag(self.sigma_beta))

    @property
    def noise_precision(self) -> np.ndarray:
        return self.a / self.b

    @classmethod
    def prior(cls, mu0, sigma0, t: int = 0) -> "MgrPosterior":
        return cls(mu0, sigma0, [], [], t)

    @classmethod
    def from_copula_state(cls, state: PosteriorState) -> "MgrPosterior":
        """Gaussian with the mean and covariance of a log-normal posterior."""
        return cls(state.mean_beta, state.beta_cov, [], [], state.t)

    def to_dict(self) -> dict:
        return {"t": self.t, "mu_beta": self.mu_beta.tolist(), "sigma_beta": self.sigma_beta.tolist(),
                "a": self.a.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "MgrPosterior":
        return cls(data["mu_beta"], data["sigma_beta"], data.get("a", []), data.get("b", []), data.get("t", 0))


def _inv_pd(m: np.ndarray) -> np.ndarray:
    try:
        c = np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise NumericError("matrix is not positive definite") from None
    ci = np.linalg.solve(c, np.eye(m.shape[0]))
    return ci.T @ ci


def expected_sq_residuals(mu, cov, Z, y) -> np.ndarray:
    """``<(y_i - Z_i beta)^2> = (y_i - Z_i mu)^2 + Z_i Sigma Z_i'`` under ``N(mu, Sigma)``."""
    return (y - Z @ mu) ** 2 + np.einsum("ij,jk,ik->i", Z, cov, Z)


def beta_block(mu0, sigma0, Z, y, s):
    """Closed-form ``(mu, Sigma)`` given noise precisions ``s``."""
    p0 = _inv_pd(np.asarray(sigma0, dtype=float))
    prec = p0 + (Z * s[:, None]).T @ Z
    cov = _inv_pd(prec)
    cov = 0.5 * (cov + cov.T)
    mu = cov @ (Z.T @ (s * y) + p0 @ mu0)
    return mu, cov


def noise_block(mu, cov, Z, y, hyper: HyperParams):
    a = np.full(y.size, hyper.a0 + 0.5)
    b = hyper.b0 + 0.5 * expected_sq_residuals(mu, cov, Z, y)
    return a, b


def mgr_fit_arrays(prior: MgrPosterior, Z, y, hyper: HyperParams, maxiter: Optional[int] = None) -> MgrPosterior:
    """Alternate the closed-form blocks for ``maxiter`` epochs (noise starts at ``a0/b0``)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    mu0, sigma0 = prior.mu_beta, prior.sigma_beta
    if Z.shape[1] != mu0.size:
        raise DomainError("design matrix and prior disagree on dimension")
    n_epochs = hyper.maxiter if maxiter is None else int(maxiter)
    if y.size == 0:
        return MgrPosterior(mu0, sigma0, [], [], prior.t + 1)
    a = np.full(y.size, hyper.a0)
    b = np.full(y.size, hyper.b0)
    mu, cov = mu0, sigma0
    for _ in range(n_epochs):
        mu, cov = beta_block(mu0, sigma0, Z, y, a / b)
        a, b = noise_block(mu, cov, Z, y, hyper)
    return MgrPosterior(mu, cov, a, b, prior.t + 1)


def mgr_fit_segment(prior: MgrPosterior, segment, hyper: HyperParams, spec: SplineBasisSpec,
                    maxiter: Optional[int] = None) -> MgrPosterior:
    xs, ys = segment
    return mgr_fit_arrays(prior, design_matrix(xs, spec), ys, hyper, maxiter)


def mgr_sequential_update(segments: Iterable, init: MgrPosterior, hyper: HyperParams,
                          spec: SplineBasisSpec) -> list:
    """Chain MGR fits; each posterior Gaussian becomes the next prior."""
    out = []
    prior = init
    for seg in segments:
        xs, ys = (seg.xs, seg.ys) if hasattr(seg, "xs") else seg
        post = mgr_fit_segment(prior, (xs, ys), hyper, spec)
        out.append(post)
        prior = MgrPosterior.prior(post.mu_beta, post.sigma_beta, post.t)
    return out


def mgr_elbo(post: MgrPosterior, prior: MgrPosterior, Z, y, hyper: HyperParams) -> float:
    """ELBO of the MGR model with the displayed constant ``-M/2 log 2 pi`` (``M`` = p)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    a0, b0 = hyper.a0, hyper.b0
    mu, cov, a, b = post.mu_beta, post.sigma_beta, post.a, post.b
    mu0, sigma0 = prior.mu_beta, prior.sigma_beta
    p = mu.size
    p0 = _inv_pd(sigma0)
    ln_s = digamma(a) - np.log(b)
    s = a / b
    r2 = expected_sq_residuals(mu, cov, Z, y)
    _, ld0 = np.linalg.slogdet(sigma0)
    sign, ld = np.linalg.slogdet(cov)
    if sign <= 0:
        raise NumericError("Sigma_beta is not positive definite")
    val = 0.5 * ln_s.sum() - 0.5 * np.sum(s * r2)
    val += -0.5 * p * math.log(2 * math.pi) - 0.5 * ld0
    val += -0.5 * (mu @ p0 @ mu + np.trace(p0 @ cov) - 2 * mu0 @ p0 @ mu + mu0 @ p0 @ mu0)
    val += (a0 - 1) * ln_s.sum() - b0 * s.sum() + 0.5 * ld
    val += -np.sum(a * np.log(b)) - np.sum((a - 1) * ln_s) + gammaln(a).sum() + np.sum(b * s)
    return float(val)


@dataclass(frozen=True)
class MgrResiduals:
    sigma: np.ndarray
    mu: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def max_abs(self) -> float:
        return float(max(np.abs(x).max() if x.size else 0.0 for x in (self.sigma, self.mu, self.a, self.b)))


def mgr_stationarity(post: MgrPosterior, prior: MgrPosterior, Z, y, hyper: HyperParams,
                     noise_from: Optional[MgrPosterior] = None) -> MgrResiduals:
    """Residuals of the four stationarity equations.

    ``noise_from`` supplies the ``<s>`` used in the ``Sigma``/``mu`` equations
    (default: ``post`` itself).  The ``b`` equation is written with the
    factor ``1/2`` on the expected squared residual, matching the ELBO.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    src = post if noise_from is None else noise_from
    s = src.a / src.b
    p0 = _inv_pd(prior.sigma_beta)
    zsz = (Z * s[:, None]).T @ Z
    r_sigma = -0.5 * zsz - 0.5 * p0.T + 0.5 * _inv_pd(post.sigma_beta).T
    r_mu = Z.T @ (s * y) - zsz @ post.mu_beta - p0 @ post.mu_beta + p0 @ prior.mu_beta
    r2 = expected_sq_residuals(post.mu_beta, post.sigma_beta, Z, y)
    a, b = post.a, post.b
    k = hyper.b0 + 0.5 * r2
    r_a = polygamma(1, a) * (0.5 - a + hyper.a0) - k / b + 1.0
    r_b = -(hyper.a0 + 0.5) / b + a * k / b**2
    return MgrResiduals(r_sigma, r_mu, r_a, r_b)
