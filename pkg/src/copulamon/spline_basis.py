"""M-spline and I-spline bases used by the monotone power-curve model.

An I-spline of order ``p`` is the integral of the M-spline of the same order.
Evaluated on a knot vector whose boundary knots are repeated ``p + 1`` times,
``K`` interior knots give ``K + p + 1`` I-spline columns; the first column is
identically one, so a non-negative coefficient vector always yields a
non-decreasing curve that starts at the first coefficient.

Indices are zero based throughout.  The last non-degenerate knot interval is
treated as closed on the right, so every basis function is defined at the
upper boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import DomainError

# Knot spacing below this is treated as a zero-width interval.
_EPS = 1e-12
_RANGE_TOL = 1e-9


@dataclass(frozen=True)
class SplineBasisSpec:
    """Interior knots, boundary and order of an I-spline basis.

    The defaults place interior knots every 1 m/s from cut-in (3 m/s) to rated
    wind speed (14 m/s) with order 3, on the boundary ``[0, 25]`` m/s.
    """

    interior_knots: tuple = tuple(float(v) for v in range(3, 15))
    boundary: tuple = (0.0, 25.0)
    order: int = 3

    def __post_init__(self):
        knots = tuple(float(k) for k in self.interior_knots)
        lo, hi = (float(b) for b in self.boundary)
        order = int(self.order)
        if order < 1 or order != self.order:
            raise DomainError(f"order must be a positive integer, got {self.order!r}")
        if not lo < hi:
            raise DomainError(f"boundary must satisfy L < U, got {self.boundary!r}")
        if any(b <= a for a, b in zip(knots, knots[1:])):
            raise DomainError("interior knots must be strictly increasing")
        if knots and (knots[0] <= lo or knots[-1] >= hi):
            raise DomainError("interior knots must lie strictly inside the boundary")
        object.__setattr__(self, "interior_knots", knots)
        object.__setattr__(self, "boundary", (lo, hi))
        object.__setattr__(self, "order", order)

    @property
    def n_interior(self) -> int:
        return len(self.interior_knots)

    @property
    def n_basis(self) -> int:
        """Number of I-spline columns, ``K + p + 1``."""
        return self.n_interior + self.order + 1

    @property
    def knots(self) -> np.ndarray:
        """Augmented knot vector with each boundary knot repeated ``p + 1`` times."""
        lo, hi = self.boundary
        reps = self.order + 1
        return np.concatenate([np.full(reps, lo), self.interior_knots, np.full(reps, hi)])

    def to_dict(self) -> dict:
        return {
            "interior_knots": list(self.interior_knots),
            "boundary": list(self.boundary),
            "order": self.order,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SplineBasisSpec":
        return cls(
            interior_knots=tuple(data["interior_knots"]),
            boundary=tuple(data["boundary"]),
            order=int(data["order"]),
        )


KnotsLike = Union[SplineBasisSpec, Sequence[float], np.ndarray]


def _as_knots(knots: KnotsLike) -> np.ndarray:
    if isinstance(knots, SplineBasisSpec):
        return knots.knots
    t = np.asarray(knots, dtype=float)
    if t.ndim != 1 or t.size < 2:
        raise DomainError("a knot vector needs at least two entries")
    if np.any(np.diff(t) < 0):
        raise DomainError("knot vector must be non-decreasing")
    if t[-1] - t[0] <= _EPS:
        raise DomainError("knot vector spans an empty range")
    return t


def _check_range(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    lo, hi = t[0], t[-1]
    span = hi - lo
    if np.any(~np.isfinite(x)) or np.any(x < lo - _RANGE_TOL * span) or np.any(x > hi + _RANGE_TOL * span):
        raise DomainError(f"wind speed outside the basis boundary [{lo}, {hi}]")
    return np.clip(x, lo, hi)


def _interval_index(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Index ``l`` with ``t[l] <= x < t[l+1]``; the top boundary maps to the last real interval."""
    widths = np.diff(t)
    last = int(np.nonzero(widths > _EPS)[0][-1])
    idx = np.searchsorted(t, x, side="right") - 1
    return np.minimum(idx, last)


def m_spline_matrix(x, knots: KnotsLike, order: int) -> np.ndarray:
    """All M-splines of ``order`` evaluated at ``x``.

    Returns an array of shape ``(len(x), len(t) - order)`` built with the
    order-raising recursion from the piecewise-constant order-one splines.
    Zero-width supports give identically zero columns.
    """
    t = _as_knots(knots)
    if order < 1:
        raise DomainError("order must be >= 1")
    if len(t) - order < 1:
        raise DomainError(f"{len(t)} knots cannot carry order-{order} splines")
    x = _check_range(np.atleast_1d(np.asarray(x, dtype=float)), t)
    n = x.size
    widths = np.diff(t)
    m = np.zeros((n, len(t) - 1))
    if n:
        rows = np.arange(n)
        idx = _interval_index(x, t)
        m[rows, idx] = 1.0 / widths[idx]
    xc = x[:, None]
    for r in range(2, order + 1):
        count = len(t) - r
        left = t[:count]
        span = t[r : r + count] - left
        safe = np.where(span > _EPS, span, 1.0)
        num = (xc - left) * m[:, :count] + (t[r : r + count] - xc) * m[:, 1 : count + 1]
        m = np.where(span > _EPS, r * num / ((r - 1) * safe), 0.0)
    return m


def i_spline_matrix(x, knots: KnotsLike, order: int) -> np.ndarray:
    """All I-splines of ``order`` evaluated at ``x``.

    Column ``j`` is the tail sum ``sum_{m >= j} (t[m+p+1] - t[m]) M^{p+1}_m / (p+1)``,
    which is the integral of ``M^p_j`` from the lower boundary.  The knot
    vector is padded on the right with copies of its last knot so that a raw
    knot vector (no boundary repetition) also works.
    """
    t = _as_knots(knots)
    p = int(order)
    if p < 1:
        raise DomainError("order must be >= 1")
    padded = np.concatenate([t, np.full(p + 1, t[-1])])
    m_up = m_spline_matrix(x, padded, p + 1)
    count = m_up.shape[1]
    weights = (padded[p + 1 : p + 1 + count] - padded[:count]) / (p + 1)
    b = m_up * weights
    tail = np.cumsum(b[:, ::-1], axis=1)[:, ::-1]
    n_cols = len(t) - p
    out = np.clip(tail[:, :n_cols], 0.0, 1.0)
    # exact zero and one regions of the piecewise form
    if out.size:
        xv = _check_range(np.atleast_1d(np.asarray(x, dtype=float)), t)
        l = _interval_index(xv, t)[:, None]
        j = np.arange(n_cols)[None, :]
        out = np.where(j > l, 0.0, np.where(j < l - p + 1, 1.0, out))
    return out


def m_spline(j: int, p: int, x: float, knots: KnotsLike) -> float:
    """Value of the ``j``-th M-spline of order ``p`` at ``x``.

    >>> m_spline(0, 1, 0.5, [0.0, 1.0])
    1.0
    """
    t = _as_knots(knots)
    n_funcs = len(t) - p
    if not 0 <= j < n_funcs:
        raise DomainError(f"basis index {j} outside [0, {n_funcs})")
    return float(m_spline_matrix([x], t, p)[0, j])


def i_spline(j: int, p: int, x: float, knots: KnotsLike) -> float:
    """Value of the ``j``-th I-spline of order ``p`` at ``x``.

    Uses the piecewise form: 0 when ``j`` is past the knot interval holding
    ``x``, 1 when the whole support of ``M^p_j`` lies to the left of ``x``,
    and the M-spline sum in between.
    """
    t = _as_knots(knots)
    n_funcs = len(t) - p
    if not 0 <= j < n_funcs:
        raise DomainError(f"basis index {j} outside [0, {n_funcs})")
    xv = _check_range(np.array([x], dtype=float), t)
    padded = np.concatenate([t, np.full(p + 1, t[-1])])
    l = int(_interval_index(xv, t)[0])
    if j > l:
        return 0.0
    if j < l - p + 1:
        return 1.0
    m_up = m_spline_matrix(xv, padded, p + 1)[0]
    total = 0.0
    for m in range(j, l + 1):
        total += (padded[m + p + 1] - padded[m]) * m_up[m] / (p + 1)
    return float(min(max(total, 0.0), 1.0))


def design_matrix(xs, spec: SplineBasisSpec) -> np.ndarray:
    """I-spline design matrix ``Z`` with shape ``(N, K + p + 1)``."""
    xs = np.asarray(xs, dtype=float).ravel()
    if xs.size == 0:
        return np.zeros((0, spec.n_basis))
    # The last column belongs to the zero-width M-spline at U and is dropped.
    return i_spline_matrix(xs, spec.knots, spec.order)[:, : spec.n_basis]


def spline_curve(beta, xs, spec: SplineBasisSpec) -> np.ndarray:
    """Evaluate ``sum_j beta_j I_j(x)``."""
    return design_matrix(xs, spec) @ np.asarray(beta, dtype=float)
