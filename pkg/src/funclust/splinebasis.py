"""Clamped B-spline bases on [0, 1] and the per-subject SVD re-basis.

The basis is evaluated with the Cox--de Boor recursion. Knots are evenly
spaced on [0, 1] (endpoints included) and the boundary knots are repeated
``degree + 1`` times, so ``phi(0)`` and ``phi(1)`` are unit vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DomainError, InvalidSpecError, RankError

_DOMAIN_EPS = 1e-12


def make_knots(n_knots: int, degree: int = 3) -> NDArray:
    """Return the clamped knot vector for ``n_knots`` evenly spaced breakpoints.

    The breakpoints are ``(r - 1) / (n_knots - 1)`` for ``r = 1..n_knots``;
    each endpoint is repeated so it appears ``degree + 1`` times. The
    resulting basis has ``n_knots + degree - 1`` functions.
    """
    if int(n_knots) != n_knots or n_knots < 2:
        raise InvalidSpecError(f"need at least 2 knots, got {n_knots!r}")
    if int(degree) != degree or degree < 0:
        raise InvalidSpecError(f"degree must be a nonnegative integer, got {degree!r}")
    breaks = np.linspace(0.0, 1.0, int(n_knots))
    return np.concatenate([np.zeros(degree), breaks, np.ones(degree)])


@dataclass(frozen=True)
class BasisSpec:
    """Knot layout and degree of a clamped B-spline basis on [0, 1]."""

    n_knots: int = 6
    degree: int = 3

    def __post_init__(self):
        # validates eagerly so a bad spec never reaches evaluation
        make_knots(self.n_knots, self.degree)

    @property
    def p(self) -> int:
        return self.n_knots + self.degree - 1

    @cached_property
    def knots(self) -> NDArray:
        return make_knots(self.n_knots, self.degree)

    @property
    def breakpoints(self) -> NDArray:
        return np.linspace(0.0, 1.0, self.n_knots)


DEFAULT_BASIS = BasisSpec(6, 3)


def _check_times(t: ArrayLike) -> NDArray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if t.ndim != 1:
        raise DomainError("times must be a scalar or a 1-d array")
    if not np.all(np.isfinite(t)):
        raise DomainError("times must be finite")
    if np.any(t < -_DOMAIN_EPS) or np.any(t > 1.0 + _DOMAIN_EPS):
        bad = t[(t < -_DOMAIN_EPS) | (t > 1.0 + _DOMAIN_EPS)][0]
        raise DomainError(f"time {bad!r} lies outside [0, 1]")
    return np.clip(t, 0.0, 1.0)


def _cox_de_boor(t: NDArray, knots: NDArray, degree: int) -> NDArray:
    """All degree-``degree`` B-splines on ``knots`` at points ``t``.

    Returns an array of shape ``(len(t), len(knots) - degree - 1)``.
    """
    n_int = len(knots) - 1
    basis = np.zeros((len(t), n_int))
    # half-open spans [k_j, k_{j+1}); t == 1 goes to the last nonempty span
    last = np.max(np.nonzero(knots[1:] > knots[:-1])[0])
    span = np.searchsorted(knots, t, side="right") - 1
    span = np.minimum(span, last)
    basis[np.arange(len(t)), span] = 1.0
    for k in range(1, degree + 1):
        m = n_int - k
        new = np.zeros((len(t), m))
        for j in range(m):
            left_den = knots[j + k] - knots[j]
            right_den = knots[j + k + 1] - knots[j + 1]
            term = np.zeros(len(t))
            if left_den > 0:
                term += (t - knots[j]) / left_den * basis[:, j]
            if right_den > 0:
                term += (knots[j + k + 1] - t) / right_den * basis[:, j + 1]
            new[:, j] = term
        basis = new
    return basis


def eval_basis(t: float, spec: BasisSpec = DEFAULT_BASIS) -> NDArray:
    """Evaluate ``phi(t)``, the vector of ``spec.p`` basis values at one point."""
    if np.ndim(t) != 0:
        raise DomainError("eval_basis takes a single time point")
    return _cox_de_boor(_check_times(t), spec.knots, spec.degree)[0]


def eval_basis_matrix(times: ArrayLike, spec: BasisSpec = DEFAULT_BASIS) -> NDArray:
    """Stack ``phi(t_j)`` row-wise into an ``n x p`` matrix."""
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise InvalidSpecError("times must be nonempty")
    return _cox_de_boor(_check_times(times), spec.knots, spec.degree)


def eval_basis_derivative(times: ArrayLike, spec: BasisSpec = DEFAULT_BASIS, order: int = 1) -> NDArray:
    """Derivatives of the basis functions, shape ``(len(times), p)``."""
    times = _check_times(times)
    if order < 0:
        raise InvalidSpecError("derivative order must be nonnegative")
    if order > spec.degree:
        return np.zeros((len(times), spec.p))
    knots = spec.knots
    vals = _cox_de_boor(times, knots, spec.degree - order)
    for k in range(spec.degree - order + 1, spec.degree + 1):
        m = vals.shape[1] - 1
        new = np.zeros((len(times), m))
        for j in range(m):
            left_den = knots[j + k] - knots[j]
            right_den = knots[j + k + 1] - knots[j + 1]
            if left_den > 0:
                new[:, j] += k * vals[:, j] / left_den
            if right_den > 0:
                new[:, j] -= k * vals[:, j + 1] / right_den
        vals = new
    return vals


def penalty_matrix(spec: BasisSpec = DEFAULT_BASIS, order: int = 2) -> NDArray:
    """Gram matrix of the ``order``-th derivatives, ``int_0^1 phi^(m) phi^(m)T dt``.

    Integrated exactly with Gauss--Legendre nodes on every knot span.
    """
    nodes, weights = np.polynomial.legendre.leggauss(spec.degree + 1)
    breaks = spec.breakpoints
    P = np.zeros((spec.p, spec.p))
    for a, b in zip(breaks[:-1], breaks[1:]):
        half = 0.5 * (b - a)
        tt = a + half * (nodes + 1.0)
        D = eval_basis_derivative(tt, spec, order)
        P += (D * (half * weights)[:, None]).T @ D
    return 0.5 * (P + P.T)


@dataclass(frozen=True)
class SvdRebasis:
    """Thin SVD ``basis = U diag(D) V^T`` of one subject's basis matrix.

    Coefficients in the orthonormal ``U`` basis are ``beta = diag(D) V^T eta``.
    """

    left: NDArray
    singular_values: NDArray
    right: NDArray

    @property
    def transform(self) -> NDArray:
        """The ``p x p`` map ``eta -> beta``."""
        return self.singular_values[:, None] * self.right.T

    @property
    def inverse_transform(self) -> NDArray:
        """The ``p x p`` map ``beta -> eta``."""
        return self.right / self.singular_values[None, :]

    def to_beta(self, eta: ArrayLike) -> NDArray:
        return self.transform @ np.asarray(eta, dtype=float)

    def to_eta(self, beta: ArrayLike) -> NDArray:
        return self.inverse_transform @ np.asarray(beta, dtype=float)

    def reconstruct(self) -> NDArray:
        return (self.left * self.singular_values) @ self.right.T


def svd_rebasis(basis: ArrayLike, subject_id=None, rtol: float = 1e-10) -> SvdRebasis:
    """Orthonormal re-basis of a full-column-rank basis matrix.

    Raises
    ------
    RankError
        If the matrix has fewer rows than columns or is numerically rank
        deficient. The offending ``subject_id`` is carried on the error.
    """
    basis = np.asarray(basis, dtype=float)
    n, p = basis.shape
    who = f"subject {subject_id!r}: " if subject_id is not None else ""
    if n < p:
        raise RankError(f"{who}{n} observations cannot support {p} basis functions", subject_id)
    U, D, Vt = np.linalg.svd(basis, full_matrices=False)
    if D[-1] <= rtol * D[0]:
        raise RankError(f"{who}basis matrix is rank deficient", subject_id)
    return SvdRebasis(U, D, Vt.T)
