"""Scoring fitted mixtures across numbers of clusters.

AIC and BIC use the parameter count of :func:`parameter_count`. The
distortion criterion runs k-means on per-subject predicted coefficient
vectors ``eta_hat_i`` and reports the within-cluster sum of squares per
subject and per dimension; jumps in ``d_G ** -b`` point at a good ``G``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg

from . import gauss
from .errors import InvalidSpecError, ModelMismatchError, NumericalError
from .kmeans import kmeans
from .mixmodel import COV_RIDGE, CurveData, ModelParams
from .preprocess import CurveObservation
from .splinebasis import DEFAULT_BASIS, BasisSpec, eval_basis_matrix

DEFAULT_B = 4.0


def information_criteria(loglik: float, m: int, N: int) -> tuple[float, float]:
    """Return ``(aic, bic)`` with ``aic = 2m - 2 loglik`` and ``bic = m log N - 2 loglik``."""
    if N < 1 or m < 1:
        raise InvalidSpecError("need N >= 1 and m >= 1")
    return 2.0 * m - 2.0 * loglik, m * np.log(N) - 2.0 * loglik


def relative_loglik_change(ll_G: float, ll_Gplus1: float) -> float:
    """``(ll_{G+1} - ll_G) / ll_{G+1}``."""
    if ll_Gplus1 == 0:
        raise ZeroDivisionError("log likelihood at G+1 is zero")
    return (ll_Gplus1 - ll_G) / ll_Gplus1


def parameter_count(G: int, p: int, h: int, r: int = 0) -> int:
    """Free parameters of the mixture.

    Weights ``G - 1``, ``lambda0`` ``p``, orthonormal loading
    ``p h - h (h + 1) / 2``, centered alphas ``G h - h``, one symmetric
    covariance of size ``p + r`` per cluster, ``sigma2``, and with
    covariates ``G r`` means plus ``sigma2_x``.
    """
    d = p + r
    m = (G - 1) + p + (p * h - h * (h + 1) // 2) + (G * h - h) + G * d * (d + 1) // 2 + 1
    if r:
        m += G * r + 1
    return int(m)


def _floored_inverse(cov: NDArray) -> NDArray:
    L = np.linalg.cholesky(gauss.ridge_floor(cov, COV_RIDGE))
    return linalg.cho_solve((L, True), np.eye(len(cov)))


def _mixed_prior(params: ModelParams, weights: NDArray):
    """Posterior-mixed prior mean and precision ``sum_k w_k Delta_k^-1``."""
    p = params.p
    mean = params.mean.lambda0 + params.mean.loading @ (weights @ params.mean.alphas)
    if params.r:
        mean = np.concatenate([mean, weights @ params.covariate_means])
    prec = sum(w * _floored_inverse(c) for w, c in zip(weights, params.latent_covs))
    return mean, prec, p


def _posterior_shift(prec: NDArray, PtP: NDArray, Pty: NDArray, prior_mean: NDArray, params: ModelParams, x=None):
    p, r = params.p, params.r
    A = prec.copy()
    A[:p, :p] += PtP / params.sigma2
    rhs = np.empty(p + r)
    rhs[:p] = (Pty - PtP @ prior_mean[:p]) / params.sigma2
    if r:
        A[p:, p:] += np.eye(r) / params.sigma2_x
        rhs[p:] = (x - prior_mean[p:]) / params.sigma2_x
    A = 0.5 * (A + A.T)
    try:
        return linalg.solve(A, rhs, assume_a="pos")
    except (linalg.LinAlgError, ValueError):
        pass
    scale = max(np.trace(A) / len(A), 1.0)
    try:
        return linalg.solve(A + 1e-10 * scale * np.eye(len(A)), rhs)
    except linalg.LinAlgError as exc:
        raise NumericalError("posterior-mixed precision is singular") from exc


def eta_hat(
    obs: CurveObservation,
    params: ModelParams,
    posterior_row: ArrayLike,
    spec: BasisSpec = DEFAULT_BASIS,
) -> NDArray:
    """Predicted coefficient vector of one subject.

    ``eta = m + gamma_hat`` with ``m = lambda0 + Lambda sum_k pi_k alpha_k`` and
    ``gamma_hat = (sigma2 sum_k pi_k Gamma_k^-1 + phi^T phi)^-1 phi^T (y - phi m)``.
    With covariates the deviation is taken jointly over ``(gamma, delta)``
    under ``sum_k pi_k Delta_k^-1`` and only the ``gamma`` part is kept.
    """
    w = np.asarray(posterior_row, dtype=float)
    if w.shape != (params.G,):
        raise InvalidSpecError("posterior row must have one entry per cluster")
    if obs.r != params.r and params.r:
        raise ModelMismatchError(f"subject {obs.subject_id!r} lacks the modelled covariates")
    phi = eval_basis_matrix(obs.times, spec)
    if phi.shape[1] != params.p:
        raise ModelMismatchError("basis and parameters disagree on p")
    mean, prec, p = _mixed_prior(params, w)
    dev = _posterior_shift(prec, phi.T @ phi, phi.T @ obs.values, mean, params, obs.covariates)
    return mean[:p] + dev[:p]


def eta_hats(data: CurveData, params: ModelParams, probs: ArrayLike) -> NDArray:
    """:func:`eta_hat` for every subject of ``data`` (rows of ``probs``)."""
    probs = np.asarray(probs, dtype=float)
    if probs.shape != (data.N, params.G):
        raise InvalidSpecError("probabilities must be N x G")
    if data.r != params.r:
        raise ModelMismatchError("data and parameters disagree on covariates")
    inverses = np.stack([_floored_inverse(c) for c in params.latent_covs])
    out = np.empty((data.N, params.p))
    for i in range(data.N):
        w = probs[i]
        mean = params.mean.lambda0 + params.mean.loading @ (w @ params.mean.alphas)
        if params.r:
            mean = np.concatenate([mean, w @ params.covariate_means])
        prec = np.tensordot(w, inverses, axes=1)
        x = data.x[i] if params.r else None
        dev = _posterior_shift(prec, data.PtP[i], data.Pty[i], mean, params, x)
        out[i] = mean[: params.p] + dev[: params.p]
    return out


def distortion(eta: ArrayLike, G: int, restarts: int = 20, seed=None) -> float:
    """Best k-means within-cluster sum of squares divided by ``N p``."""
    eta = np.asarray(eta, dtype=float)
    if eta.ndim != 2:
        raise InvalidSpecError("eta must be an N x p matrix")
    N, p = eta.shape
    if N < G:
        raise InvalidSpecError(f"cannot form {G} clusters from {N} points")
    best = kmeans(eta, G, restarts=restarts, rng=seed)
    return best.inertia / (N * p)


def distortion_delta(d: Mapping[int, float], b: float = DEFAULT_B) -> dict[int, float]:
    """``d_G ** -b - d_{G-1} ** -b`` for every ``G`` whose predecessor is present.

    Every ``G`` except the smallest needs ``G - 1`` in ``d``.
    """
    if b <= 0:
        raise InvalidSpecError("b must be positive")
    Gs = sorted(d)
    out = {}
    for G in Gs[1:]:
        if G - 1 not in d:
            raise KeyError(f"distortion for G={G - 1} is missing")
        if d[G] <= 0 or d[G - 1] <= 0:
            raise InvalidSpecError("distortions must be positive")
        out[G] = d[G] ** -b - d[G - 1] ** -b
    return out


@dataclass
class SelectionRow:
    G: int
    loglik: float
    m: int
    aic: float
    bic: float
    sigma_sum: float
    distortion: float
    rel_change: float = float("nan")
    delta: float = float("nan")


@dataclass
class SelectionSweep:
    per_G: dict = field(default_factory=dict)
    deltas: dict = field(default_factory=dict)
    b: float = DEFAULT_B
    N: int = 0

    def add(self, G: int, loglik: float, m: int, sigma_sum: float, dist: float) -> None:
        aic, bic = information_criteria(loglik, m, self.N)
        self.per_G[G] = SelectionRow(G, loglik, m, aic, bic, sigma_sum, dist)

    def finalize(self) -> "SelectionSweep":
        """Fill relative log-likelihood changes and distortion deltas where defined."""
        Gs = sorted(self.per_G)
        for G in Gs:
            row = self.per_G[G]
            nxt = self.per_G.get(G + 1)
            if nxt is not None and nxt.loglik != 0:
                row.rel_change = relative_loglik_change(row.loglik, nxt.loglik)
        dists = {}
        for G in Gs:
            dist = self.per_G[G].distortion
            if np.isfinite(dist) and dist > 0:
                dists[G] = dist
        self.deltas = {}
        for G in sorted(dists):
            if G - 1 in dists:
                self.deltas[G] = distortion_delta({G - 1: dists[G - 1], G: dists[G]}, self.b)[G]
                self.per_G[G].delta = self.deltas[G]
        return self

    def best_bic(self) -> int:
        return min(self.per_G.values(), key=lambda row: (row.bic, row.G)).G

    def best_aic(self) -> int:
        return min(self.per_G.values(), key=lambda row: (row.aic, row.G)).G

    def peak_delta(self) -> int | None:
        if not self.deltas:
            return None
        return max(sorted(self.deltas), key=lambda G: self.deltas[G])

    def rows(self) -> list[SelectionRow]:
        return [self.per_G[G] for G in sorted(self.per_G)]
