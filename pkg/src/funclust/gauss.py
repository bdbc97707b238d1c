"""Gaussian densities and Gaussian conditioning.

Three routes to the posterior of a latent ``xi ~ N(m0, Delta)`` observed
through ``u = S xi + offset + noise`` with ``noise ~ N(0, diag(R))``:

* :func:`condition_joint` -- information form
  ``V = (Delta^-1 + S^T R^-1 S)^-1``.
* :func:`woodbury_condition` -- ``V = Delta - Delta S^T (R + S Delta S^T)^-1 S Delta``.
* :func:`factored_condition` -- batched square-root form used by the fitting
  code: with ``Delta = C C^T`` and ``B = S^T R^-1 S``,
  ``V = C (I + C^T B C)^-1 C^T``. It never inverts ``Delta`` and the matrix it
  factorizes has all eigenvalues >= 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg
from scipy.special import logsumexp

from .errors import InvalidSpecError, NumericalError

LOG_2PI = float(np.log(2.0 * np.pi))

__all__ = [
    "GaussianMoments",
    "LOG_2PI",
    "condition",
    "condition_joint",
    "factored_condition",
    "log_mvn_pdf",
    "logsumexp",
    "ridge_floor",
    "woodbury_condition",
]


@dataclass(frozen=True)
class GaussianMoments:
    mean: NDArray
    cov: NDArray

    @property
    def dim(self) -> int:
        return len(self.mean)


def ridge_floor(cov: ArrayLike, rel: float = 1e-10) -> NDArray:
    """Symmetrize ``cov`` and add ``eps I`` if its smallest eigenvalue is below ``eps``.

    ``eps = rel * trace / dim``.
    """
    cov = np.asarray(cov, dtype=float)
    cov = 0.5 * (cov + cov.T)
    d = cov.shape[0]
    if d == 0 or rel <= 0:
        return cov
    eps = rel * abs(np.trace(cov)) / d
    if eps == 0.0:
        eps = rel
    if np.linalg.eigvalsh(cov)[0] < eps:
        cov = cov + eps * np.eye(d)
    return cov


def _cholesky(cov: NDArray, what: str = "covariance") -> NDArray:
    try:
        return linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"{what} is not positive definite") from exc


def log_mvn_pdf(x: ArrayLike, mean: ArrayLike, cov: ArrayLike, ridge: float = 1e-10) -> float:
    """Log density of ``N(mean, cov)`` at ``x`` through a Cholesky factor."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if x.shape != mean.shape or cov.shape != (len(x), len(x)):
        raise InvalidSpecError("dimension mismatch between x, mean and covariance")
    L = _cholesky(ridge_floor(cov, ridge))
    z = linalg.solve_triangular(L, x - mean, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(-0.5 * (len(x) * LOG_2PI + logdet + z @ z))


def _check_conditioning(prior_cov, design, noise_var, observation, offset, prior_mean):
    prior_cov = np.atleast_2d(np.asarray(prior_cov, dtype=float))
    design = np.atleast_2d(np.asarray(design, dtype=float))
    noise_var = np.atleast_1d(np.asarray(noise_var, dtype=float))
    observation = np.atleast_1d(np.asarray(observation, dtype=float))
    n, d = design.shape
    offset = np.zeros(n) if offset is None else np.atleast_1d(np.asarray(offset, dtype=float))
    prior_mean = np.zeros(d) if prior_mean is None else np.atleast_1d(np.asarray(prior_mean, dtype=float))
    if prior_cov.shape != (d, d) or noise_var.shape != (n,) or observation.shape != (n,):
        raise InvalidSpecError("dimension mismatch in conditioning inputs")
    if offset.shape != (n,) or prior_mean.shape != (d,):
        raise InvalidSpecError("dimension mismatch in conditioning inputs")
    if np.any(noise_var <= 0):
        raise InvalidSpecError("noise variances must be positive")
    return prior_cov, design, noise_var, observation, offset, prior_mean


def condition_joint(prior_cov, design, noise_var, observation, offset=None, prior_mean=None) -> GaussianMoments:
    """Posterior of the latent vector in information form.

    ``cov = (Delta^-1 + S^T R^-1 S)^-1`` and
    ``mean = m0 + cov S^T R^-1 (u - offset - S m0)``.
    """
    Delta, S, R, u, off, m0 = _check_conditioning(prior_cov, design, noise_var, observation, offset, prior_mean)
    Lp = _cholesky(Delta, "prior covariance")
    prior_prec = linalg.cho_solve((Lp, True), np.eye(len(m0)))
    SR = S.T / R
    prec = prior_prec + SR @ S
    Lq = _cholesky(0.5 * (prec + prec.T), "posterior precision")
    cov = linalg.cho_solve((Lq, True), np.eye(len(m0)))
    mean = m0 + cov @ (SR @ (u - off - S @ m0))
    return GaussianMoments(mean, 0.5 * (cov + cov.T))


def woodbury_condition(prior_cov, design, noise_var, observation, offset=None, prior_mean=None) -> GaussianMoments:
    """Posterior of the latent vector through the Sherman--Morrison--Woodbury identity.

    Only the ``n x n`` matrix ``R + S Delta S^T`` is factorized; ``Delta`` is
    never inverted.
    """
    Delta, S, R, u, off, m0 = _check_conditioning(prior_cov, design, noise_var, observation, offset, prior_mean)
    DS = Delta @ S.T
    K = np.diag(R) + S @ DS
    L = _cholesky(0.5 * (K + K.T), "marginal covariance")
    gain = linalg.cho_solve((L, True), DS.T)  # (R + S Delta S^T)^-1 S Delta
    cov = Delta - DS @ gain
    mean = m0 + gain.T @ (u - off - S @ m0)
    return GaussianMoments(mean, 0.5 * (cov + cov.T))


def condition(prior_cov, design, noise_var, observation, offset=None, prior_mean=None) -> GaussianMoments:
    """Dispatch to Woodbury when there are more observations than latents."""
    n, d = np.atleast_2d(design).shape
    if n > d:
        return woodbury_condition(prior_cov, design, noise_var, observation, offset, prior_mean)
    return condition_joint(prior_cov, design, noise_var, observation, offset, prior_mean)


def factored_condition(prior_chol: NDArray, precision: NDArray, shift: NDArray):
    """Batched Gaussian conditioning in square-root form.

    Parameters
    ----------
    prior_chol : ndarray, shape (..., d, d)
        Lower Cholesky factors ``C`` of the prior covariances.
    precision : ndarray, shape (..., d, d)
        Data precision ``B = S^T R^-1 S``.
    shift : ndarray, shape (..., d)
        Data term ``b = S^T R^-1 (u - S m0)``.

    Returns
    -------
    mean, cov : ndarray
        Posterior mean offset ``V b`` and covariance ``V``.
    logdet : ndarray
        ``log|I + C^T B C|`` which equals ``log|R + S Delta S^T| - log|R|``.
    quad : ndarray
        ``b^T V b``, the Woodbury reduction of the marginal quadratic form.

    All leading dimensions broadcast.
    """
    C = np.asarray(prior_chol, dtype=float)
    B = np.asarray(precision, dtype=float)
    b = np.asarray(shift, dtype=float)
    Ct = np.swapaxes(C, -1, -2)
    M = Ct @ B @ C
    d = M.shape[-1]
    M = 0.5 * (M + np.swapaxes(M, -1, -2)) + np.eye(d)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("conditioning matrix is not positive definite") from exc
    # W = L^-1 C^T so that V = W^T W
    W = np.linalg.solve(L, np.broadcast_to(Ct, M.shape))
    V = np.swapaxes(W, -1, -2) @ W
    Wb = (W @ b[..., None])[..., 0]
    mean = (np.swapaxes(W, -1, -2) @ Wb[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    quad = np.sum(Wb * Wb, axis=-1)
    return mean, V, logdet, quad
