"""Gaussian copula densities, Sklar-factored joints and KL utilities.

Also holds the reparameterised ELBO estimator: auxiliary Gaussian draws are
pushed through ``theta_i = F_i^{-1}(Phi((z_i - mu_i) / D_ii))`` so that each
``theta_i`` follows its log-normal marginal while the Gaussian correlation
carries the dependence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import DomainError, EstimationError, NumericError

_LOG_2PI = math.log(2.0 * math.pi)


def _as_matrix(a, name="matrix") -> np.ndarray:
    m = np.atleast_2d(np.asarray(a, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise DomainError(f"{name} must be square, got shape {m.shape}")
    return m


def _chol(m: np.ndarray, name="matrix") -> np.ndarray:
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"{name} is not positive definite") from exc


@dataclass(frozen=True)
class GaussianCopula:
    """Gaussian copula with correlation matrix ``sigma`` (unit diagonal)."""

    sigma: np.ndarray

    def __post_init__(self):
        s = _as_matrix(self.sigma, "copula correlation")
        if not np.allclose(s, s.T, atol=1e-12):
            raise DomainError("copula correlation must be symmetric")
        if not np.allclose(np.diag(s), 1.0, atol=1e-12):
            raise DomainError("copula correlation must have a unit diagonal")
        if np.linalg.eigvalsh(s).min() <= 0:
            raise DomainError("copula correlation must be positive definite")
        object.__setattr__(self, "sigma", s)

    @property
    def dim(self) -> int:
        return self.sigma.shape[0]

    @classmethod
    def independence(cls, dim: int) -> "GaussianCopula":
        return cls(np.eye(dim))


@dataclass(frozen=True)
class LogNormalMarginal:
    """``log(theta) ~ N(u, sigma2)``."""

    u: float
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise DomainError(f"log-normal variance must be positive, got {self.sigma2}")

    @property
    def sd(self) -> float:
        return math.sqrt(self.sigma2)

    def logpdf(self, theta):
        theta = np.asarray(theta, dtype=float)
        if np.any(theta <= 0):
            raise DomainError("log-normal support is (0, inf)")
        lt = np.log(theta)
        return -lt - 0.5 * (_LOG_2PI + math.log(self.sigma2)) - (lt - self.u) ** 2 / (2 * self.sigma2)

    def pdf(self, theta):
        return np.exp(self.logpdf(theta))

    def cdf(self, theta):
        theta = np.asarray(theta, dtype=float)
        if np.any(theta <= 0):
            raise DomainError("log-normal support is (0, inf)")
        return ndtr((np.log(theta) - self.u) / self.sd)

    def ppf(self, q):
        return np.exp(self.u + self.sd * ndtri(np.asarray(q, dtype=float)))

    @property
    def mean(self) -> float:
        return math.exp(self.u + 0.5 * self.sigma2)

    @property
    def median(self) -> float:
        return math.exp(self.u)


@dataclass(frozen=True)
class ExpandedGaussian:
    """Parameter-expanded auxiliary Gaussian ``N(mu, D sigma D)``.

    ``scale`` holds the positive diagonal of ``D``; ``sigma`` is a correlation
    matrix.
    """

    mu: np.ndarray
    scale: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        scale = np.atleast_1d(np.asarray(self.scale, dtype=float))
        sigma = GaussianCopula(self.sigma).sigma
        if not (mu.shape == scale.shape == (sigma.shape[0],)):
            raise DomainError("mu, scale and sigma dimensions disagree")
        if np.any(scale <= 0):
            raise DomainError("expansion scales must be positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def cov(self) -> np.ndarray:
        return self.sigma * np.outer(self.scale, self.scale)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        chol = _chol(self.cov, "expanded covariance")
        return self.mu + rng.standard_normal((n, self.dim)) @ chol.T

    def logpdf(self, z) -> np.ndarray:
        return mvn_logpdf(z, self.mu, self.cov)


@dataclass(frozen=True)
class CopulaModel:
    """Gaussian copula plus log-normal marginals (a multivariate log-normal)."""

    copula: GaussianCopula
    marginals: tuple

    def __post_init__(self):
        object.__setattr__(self, "marginals", tuple(self.marginals))
        if len(self.marginals) != self.copula.dim:
            raise DomainError("one marginal per copula dimension is required")

    @property
    def dim(self) -> int:
        return self.copula.dim

    @property
    def log_mean(self) -> np.ndarray:
        return np.array([m.u for m in self.marginals])

    @property
    def log_cov(self) -> np.ndarray:
        sd = np.array([m.sd for m in self.marginals])
        return self.copula.sigma * np.outer(sd, sd)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        chol = _chol(self.log_cov, "log-scale covariance")
        return np.exp(self.log_mean + rng.standard_normal((n, self.dim)) @ chol.T)


def mvn_logpdf(x, mean, cov) -> np.ndarray:
    """Row-wise multivariate normal log density."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    chol = _chol(np.atleast_2d(cov), "covariance")
    diff = x - np.asarray(mean, dtype=float)
    sol = np.linalg.solve(chol, diff.T)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    k = chol.shape[0]
    return -0.5 * (k * _LOG_2PI + logdet + (sol**2).sum(axis=0))


def gaussian_copula_logdensity(uvec, copula: GaussianCopula) -> np.ndarray:
    """Log of ``|S|^{-1/2} exp(-z'(S^{-1} - I)z / 2)`` with ``z = Phi^{-1}(u)``.

    Accepts a single point or an ``(n, p)`` array of points.
    """
    u = np.asarray(uvec, dtype=float)
    single = u.ndim == 1
    u = np.atleast_2d(u)
    if u.shape[1] != copula.dim:
        raise DomainError("point dimension does not match the copula")
    if np.any(u <= 0) or np.any(u >= 1):
        raise DomainError("copula arguments must lie strictly inside (0, 1)")
    z = ndtri(u)
    s = copula.sigma
    sign, logdet = np.linalg.slogdet(s)
    quad = np.einsum("ij,jk,ik->i", z, np.linalg.inv(s) - np.eye(copula.dim), z)
    out = -0.5 * logdet - 0.5 * quad
    return out[0] if single else out


def gaussian_copula_density(uvec, copula: GaussianCopula):
    return np.exp(gaussian_copula_logdensity(uvec, copula))


def sklar_joint_logpdf(copula: GaussianCopula, marginals: Sequence[LogNormalMarginal], theta) -> np.ndarray:
    th = np.asarray(theta, dtype=float)
    single = th.ndim == 1
    th = np.atleast_2d(th)
    if th.shape[1] != len(marginals) or copula.dim != len(marginals):
        raise DomainError("theta, marginals and copula dimensions disagree")
    if np.any(th <= 0):
        raise DomainError("log-normal marginals need strictly positive theta")
    cdfs = np.column_stack([m.cdf(th[:, i]) for i, m in enumerate(marginals)])
    # Far tails round to 0 or 1; nudge inside so the quantile stays finite.
    cdfs = np.clip(cdfs, 1e-300, np.nextafter(1.0, 0.0))
    out = gaussian_copula_logdensity(cdfs, copula)
    out = out + sum(m.logpdf(th[:, i]) for i, m in enumerate(marginals))
    return out[0] if single else out


def sklar_joint_pdf(copula: GaussianCopula, marginals: Sequence[LogNormalMarginal], theta):
    """Copula density at the marginal CDFs times the product of marginal PDFs."""
    return np.exp(sklar_joint_logpdf(copula, marginals, theta))


def kl_mvn(mu1, sig1, mu2, sig2) -> float:
    """``KL(N(mu1, sig1) || N(mu2, sig2))`` in closed form."""
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=float))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=float))
    s1 = _as_matrix(sig1)
    s2 = _as_matrix(sig2)
    k = mu1.size
    c1 = _chol(s1, "sig1")
    c2 = _chol(s2, "sig2")
    diff = np.linalg.solve(c2, mu1 - mu2)
    tr = np.sum(np.linalg.solve(c2, c1) ** 2)
    logdet = 2.0 * (np.log(np.diag(c2)).sum() - np.log(np.diag(c1)).sum())
    return float(max(0.5 * (diff @ diff + logdet + tr - k), 0.0))


@dataclass(frozen=True)
class KLDecomposition:
    total: float
    copula: float
    marginal: float
    se_total: float
    se_copula: float
    se_marginal: float
    n_samples: int


def _mean_se(v: np.ndarray):
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def kl_decomposition_check(q: CopulaModel, p: CopulaModel, n_samples: int = 100_000, seed=0) -> KLDecomposition:
    """Monte Carlo estimates of the total, copula and marginal KL terms.

    Draws from ``q`` and averages ``log q - log p`` split into the copula
    log-density ratio and the per-coordinate marginal log-density ratios.
    """
    if n_samples < 10_000:
        raise DomainError("n_samples must be at least 1e4")
    if q.dim != p.dim:
        raise DomainError("q and p must share a dimension")
    rng = np.random.default_rng(seed)
    theta = q.sample(n_samples, rng)
    total = sklar_joint_logpdf(q.copula, q.marginals, theta) - sklar_joint_logpdf(p.copula, p.marginals, theta)
    marg = np.zeros(n_samples)
    for i, (mq, mp) in enumerate(zip(q.marginals, p.marginals)):
        marg += mq.logpdf(theta[:, i]) - mp.logpdf(theta[:, i])
    cop = total - marg
    t, se_t = _mean_se(total)
    c, se_c = _mean_se(cop)
    m, se_m = _mean_se(marg)
    return KLDecomposition(t, c, m, se_t, se_c, se_m, n_samples)


def _check_reparam_dims(expanded: ExpandedGaussian, marginals) -> None:
    if expanded.dim != len(marginals):
        raise DomainError("expanded Gaussian and marginals have different dimensions")


def reparam_transform(z_tilde, expanded: ExpandedGaussian, marginals: Sequence[LogNormalMarginal]) -> np.ndarray:
    """Map auxiliary draws to ``theta_i = F_i^{-1}(Phi((z_i - mu_i) / D_ii))``.

    For log-normal marginals this is ``exp(u_i + sd_i * (z_i - mu_i) / D_ii)``,
    which is strictly increasing in every coordinate.
    """
    _check_reparam_dims(expanded, marginals)
    z = np.asarray(z_tilde, dtype=float)
    u = np.array([m.u for m in marginals])
    sd = np.array([m.sd for m in marginals])
    return np.exp(u + sd * (z - expanded.mu) / expanded.scale)


def reparam_inverse(theta, expanded: ExpandedGaussian, marginals: Sequence[LogNormalMarginal]) -> np.ndarray:
    _check_reparam_dims(expanded, marginals)
    th = np.asarray(theta, dtype=float)
    if np.any(th <= 0):
        raise DomainError("theta must be positive")
    u = np.array([m.u for m in marginals])
    sd = np.array([m.sd for m in marginals])
    return expanded.mu + expanded.scale * (np.log(th) - u) / sd


def reparam_log_jacobian(z_tilde, expanded: ExpandedGaussian, marginals: Sequence[LogNormalMarginal]) -> np.ndarray:
    """``sum_i log h_i'(z_i)`` for the transform above (row-wise)."""
    sd = np.array([m.sd for m in marginals])
    theta = reparam_transform(z_tilde, expanded, marginals)
    return np.sum(np.log(theta) + np.log(sd / expanded.scale), axis=-1)


def monotone_elbo_terms(log_joint, log_q, log_abs_jac, increasing: bool = True, dim: int = 1) -> np.ndarray:
    """Per-sample ELBO integrand for a monotone transform.

    The increasing branch is ``log p(h(z), X) - log q(z) + sum log h'(z)``.
    The decreasing branch multiplies the same integrand (with ``|h'|``) by
    ``(-1)^dim``; it is kept as written for completeness and is never used by
    the Gaussian-copula model.
    """
    vals = np.asarray(log_joint) - np.asarray(log_q) + np.asarray(log_abs_jac)
    if increasing:
        return vals
    return (-1.0) ** dim * vals


@dataclass(frozen=True)
class ElboEstimate:
    value: float
    stderr: float
    n_used: int
    n_rejected: int


def reparam_elbo_estimate(
    model_logjoint: Callable[[np.ndarray], np.ndarray],
    expanded: ExpandedGaussian,
    marginals: Sequence[LogNormalMarginal],
    n_samples: int = 10_000,
    seed=0,
) -> ElboEstimate:
    """Monte Carlo ELBO through the reparameterised Gaussian-copula proposal.

    ``model_logjoint`` receives an ``(n, p)`` array of positive ``theta`` and
    returns ``log p(theta, X)`` per row.  Non-finite values are dropped and
    counted; more than 1% dropped raises :class:`EstimationError`.
    """
    if n_samples < 1000:
        raise DomainError("n_samples must be at least 1e3")
    _check_reparam_dims(expanded, marginals)
    rng = np.random.default_rng(seed)
    z = expanded.sample(n_samples, rng)
    theta = reparam_transform(z, expanded, marginals)
    with np.errstate(all="ignore"):
        lj = np.asarray(model_logjoint(theta), dtype=float)
    vals = monotone_elbo_terms(lj, expanded.logpdf(z), reparam_log_jacobian(z, expanded, marginals))
    ok = np.isfinite(vals)
    n_bad = int((~ok).sum())
    if n_bad > 0.01 * n_samples:
        raise EstimationError(f"{n_bad} of {n_samples} samples gave a non-finite log joint")
    vals = vals[ok]
    mean, se = _mean_se(vals)
    return ElboEstimate(mean, se, int(ok.sum()), n_bad)
