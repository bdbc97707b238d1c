"""Mixture model over spline coefficients: parameters, likelihood, posteriors.

Given cluster ``k`` a subject's observations ``u_i = (y_i, x_i)`` are normal
with mean ``S_i mu_k`` and covariance ``S_i Delta_k S_i^T + R``, where
``S_i = blockdiag(phi_i, I_r)`` and ``R = blockdiag(sigma2 I, sigma2_x I)``.
With no covariates (``r = 0``) this is ``N(phi_i mu_k, phi_i Gamma_k phi_i^T + sigma2 I)``.

The likelihood of a subject depends on its basis matrix only through
``phi_i^T phi_i``, ``phi_i^T y_i`` and ``y_i^T y_i``; :class:`CurveData`
precomputes these so every subject and cluster is handled in one batched
linear-algebra call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import gauss
from .errors import DomainError, InvalidSpecError, ModelMismatchError, NumericalError, RankError
from .preprocess import CurveObservation
from .splinebasis import DEFAULT_BASIS, BasisSpec, eval_basis_matrix, svd_rebasis

COV_RIDGE = 1e-10


@dataclass
class CurveData:
    """Per-subject sufficient statistics for a collection of curves."""

    ids: list
    n: NDArray
    yty: NDArray
    PtP: NDArray
    Pty: NDArray
    x: NDArray
    spec: BasisSpec
    observations: list = field(repr=False, default_factory=list)
    covariate_names: tuple = ()
    # subjects whose conditioning runs in their orthonormal SVD basis
    rebased: NDArray | None = None
    z: NDArray | None = field(repr=False, default=None)
    T: NDArray | None = field(repr=False, default=None)
    Tinv: NDArray | None = field(repr=False, default=None)
    resid0: NDArray | None = field(repr=False, default=None)

    @classmethod
    def from_observations(
        cls,
        observations: Sequence[CurveObservation],
        spec: BasisSpec = DEFAULT_BASIS,
        use_covariates: bool = True,
        rebase: bool = False,
    ) -> "CurveData":
        """Build the statistics table.

        With ``rebase=True`` every subject with at least ``p`` distinct time
        points is conditioned through ``y_i = U_i beta_i``,
        ``beta_i = diag(D_i) V_i^T eta_i``; the others keep the direct form.
        """
        observations = list(observations)
        if not observations:
            raise InvalidSpecError("no subjects")
        p = spec.p
        N = len(observations)
        rs = {o.r for o in observations}
        if use_covariates and len(rs) != 1:
            raise ModelMismatchError("subjects disagree on the number of covariates")
        r = rs.pop() if use_covariates and len(rs) == 1 else 0
        n = np.empty(N)
        yty = np.empty(N)
        PtP = np.empty((N, p, p))
        Pty = np.empty((N, p))
        x = np.zeros((N, r))
        for i, obs in enumerate(observations):
            phi = eval_basis_matrix(obs.times, spec)
            y = obs.values
            n[i] = obs.n
            yty[i] = y @ y
            PtP[i] = phi.T @ phi
            Pty[i] = phi.T @ y
            if r:
                x[i] = obs.covariates
        names = tuple(observations[0].covariate_names) if r else ()
        data = cls(
            ids=[o.subject_id for o in observations],
            n=n,
            yty=yty,
            PtP=PtP,
            Pty=Pty,
            x=x,
            spec=spec,
            observations=observations,
            covariate_names=names,
        )
        if rebase:
            data._attach_rebasis()
        return data

    def _attach_rebasis(self) -> None:
        N, p = self.Pty.shape
        self.rebased = np.zeros(N, dtype=bool)
        self.z = np.zeros((N, p))
        self.T = np.tile(np.eye(p), (N, 1, 1))
        self.Tinv = np.tile(np.eye(p), (N, 1, 1))
        self.resid0 = np.zeros(N)
        for i, obs in enumerate(self.observations):
            if obs.n < p:
                continue
            try:
                svd = svd_rebasis(eval_basis_matrix(obs.times, self.spec), obs.subject_id)
            except RankError:
                continue
            z = svd.left.T @ obs.values
            self.rebased[i] = True
            self.z[i] = z
            self.T[i] = svd.transform
            self.Tinv[i] = svd.inverse_transform
            self.resid0[i] = max(obs.values @ obs.values - z @ z, 0.0)

    @property
    def N(self) -> int:
        return len(self.n)

    @property
    def p(self) -> int:
        return self.PtP.shape[1]

    @property
    def r(self) -> int:
        return self.x.shape[1]

    def basis_matrix(self, i: int) -> NDArray:
        return eval_basis_matrix(self.observations[i].times, self.spec)


@dataclass
class MeanStructure:
    """Cluster mean coefficients ``mu_k = lambda0 + loading @ alphas[k]``."""

    lambda0: NDArray
    loading: NDArray
    alphas: NDArray

    def __post_init__(self):
        self.lambda0 = np.asarray(self.lambda0, dtype=float)
        self.loading = np.asarray(self.loading, dtype=float).reshape(len(self.lambda0), -1)
        self.alphas = np.asarray(self.alphas, dtype=float)
        if self.alphas.ndim == 1:
            self.alphas = self.alphas.reshape(-1, self.loading.shape[1])

    @property
    def h(self) -> int:
        return self.loading.shape[1]

    @property
    def G(self) -> int:
        return self.alphas.shape[0]

    def cluster_means(self) -> NDArray:
        return self.lambda0[None, :] + self.alphas @ self.loading.T

    def normalized(self) -> "MeanStructure":
        """Recenter the alphas to sum to zero and orthonormalize the loading.

        Both steps are reparametrizations: the cluster means do not change.
        """
        lambda0 = self.lambda0.copy()
        loading = self.loading.copy()
        alphas = self.alphas.copy()
        if self.h == 0:
            return MeanStructure(lambda0, loading, alphas)
        shift = alphas.mean(axis=0)
        lambda0 = lambda0 + loading @ shift
        alphas = alphas - shift
        Q, Rq = np.linalg.qr(loading)
        signs = np.where(np.diag(Rq) < 0, -1.0, 1.0)
        Q = Q * signs
        Rq = Rq * signs[:, None]
        return MeanStructure(lambda0, Q, alphas @ Rq.T)


@dataclass
class ModelParams:
    """All parameters of the mixture.

    ``latent_covs[k]`` is ``Gamma_k`` (``p x p``) without covariates and the
    partitioned ``Delta_k = [[Gamma_k, L_k], [L_k^T, D_k]]`` with them.
    """

    weights: NDArray
    mean: MeanStructure
    latent_covs: NDArray
    sigma2: float
    sigma2_x: float | None = None
    covariate_means: NDArray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.latent_covs = np.asarray(self.latent_covs, dtype=float)
        self.sigma2 = float(self.sigma2)
        if self.covariate_means is not None:
            self.covariate_means = np.asarray(self.covariate_means, dtype=float).reshape(len(self.weights), -1)
            if self.covariate_means.shape[1] == 0:
                self.covariate_means = None
        if self.sigma2_x is not None:
            self.sigma2_x = float(self.sigma2_x)
        if self.covariate_means is None:
            self.sigma2_x = None

    @property
    def G(self) -> int:
        return len(self.weights)

    @property
    def p(self) -> int:
        return len(self.mean.lambda0)

    @property
    def h(self) -> int:
        return self.mean.h

    @property
    def r(self) -> int:
        return 0 if self.covariate_means is None else self.covariate_means.shape[1]

    @property
    def d(self) -> int:
        return self.p + self.r

    @property
    def sigma_sum(self) -> float:
        return self.sigma2 + (self.sigma2_x or 0.0)

    def cluster_means(self) -> NDArray:
        return self.mean.cluster_means()

    def validate(self) -> "ModelParams":
        G, r, d = self.G, self.r, self.d
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-10:
            raise InvalidSpecError("mixing weights must lie on the simplex")
        if self.mean.G != G:
            raise InvalidSpecError("one alpha vector per cluster is required")
        if self.latent_covs.shape != (G, d, d):
            raise InvalidSpecError(f"latent covariances must have shape {(G, d, d)}")
        if not self.sigma2 > 0:
            raise InvalidSpecError("sigma2 must be positive")
        if r and not (self.sigma2_x is not None and self.sigma2_x > 0):
            raise InvalidSpecError("sigma2_x must be positive when covariates are modelled")
        return self

    def permuted(self, order: Sequence[int]) -> "ModelParams":
        order = np.asarray(order)
        mean = MeanStructure(self.mean.lambda0, self.mean.loading, self.mean.alphas[order])
        cm = None if self.covariate_means is None else self.covariate_means[order]
        return ModelParams(self.weights[order], mean, self.latent_covs[order], self.sigma2, self.sigma2_x, cm)

    def copy(self) -> "ModelParams":
        return self.permuted(np.arange(self.G))

    def to_dict(self) -> dict:
        return {
            "G": self.G,
            "p": self.p,
            "h": self.h,
            "r": self.r,
            "weights": self.weights.tolist(),
            "lambda0": self.mean.lambda0.tolist(),
            "loading": self.mean.loading.tolist(),
            "alphas": self.mean.alphas.tolist(),
            "latent_covs": self.latent_covs.tolist(),
            "sigma2": self.sigma2,
            "sigma2_x": self.sigma2_x,
            "covariate_means": None if self.covariate_means is None else self.covariate_means.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        p, h = int(d["p"]), int(d["h"])
        G = len(d["weights"])
        mean = MeanStructure(
            np.array(d["lambda0"], dtype=float),
            np.array(d["loading"], dtype=float).reshape(p, h),
            np.array(d["alphas"], dtype=float).reshape(G, h),
        )
        cm = d.get("covariate_means")
        return cls(
            np.array(d["weights"], dtype=float),
            mean,
            np.array(d["latent_covs"], dtype=float),
            d["sigma2"],
            d.get("sigma2_x"),
            None if cm is None else np.array(cm, dtype=float),
        )


@dataclass
class PosteriorTable:
    probs: NDArray
    assignment: NDArray
    max_prob: NDArray
    ids: list = field(default_factory=list)

    @classmethod
    def from_log_weights(cls, logw: NDArray, ids=None) -> "PosteriorTable":
        norm = gauss.logsumexp(logw, axis=1, keepdims=True)
        probs = np.exp(logw - norm)
        probs /= probs.sum(axis=1, keepdims=True)
        # np.argmax returns the first maximum: ties go to the lowest index
        assignment = np.argmax(probs, axis=1)
        max_prob = probs[np.arange(len(probs)), assignment]
        return cls(probs, assignment, max_prob, list(ids) if ids is not None else [])


def _check_compatible(data: CurveData, params: ModelParams) -> None:
    if data.r != params.r:
        raise ModelMismatchError(f"data carry {data.r} covariates but the parameters model {params.r}")
    if data.p != params.p:
        raise ModelMismatchError(f"data use {data.p} basis functions but the parameters {params.p}")


def _floored_cholesky(covs: NDArray, rel: float = COV_RIDGE) -> NDArray:
    out = np.empty_like(covs)
    for k, cov in enumerate(covs):
        try:
            out[k] = np.linalg.cholesky(gauss.ridge_floor(cov, rel))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"latent covariance of cluster {k} is not positive definite") from exc
    return out


def _blockdiag(top: NDArray, r: int, fill: float) -> NDArray:
    """Stack ``blockdiag(top[i], fill * I_r)`` for every leading index."""
    p = top.shape[-1]
    out = np.zeros(top.shape[:-2] + (p + r, p + r))
    out[..., :p, :p] = top
    idx = np.arange(p, p + r)
    out[..., idx, idx] = fill
    return out


def conditional_moments(data: CurveData, params: ModelParams):
    """Component log densities and posterior moments of the latent deviations.

    Returns
    -------
    logdens : ndarray, shape (N, G)
        ``log f_k(u_i)``.
    cond_mean : ndarray, shape (N, G, d)
        ``E[xi_i | u_i, z_i = k]``.
    cond_cov : ndarray, shape (N, G, d, d)
        ``Var[xi_i | u_i, z_i = k]``.
    """
    _check_compatible(data, params)
    p, r = data.p, data.r
    s2 = params.sigma2
    s2x = params.sigma2_x if r else 1.0
    mu = params.cluster_means()
    C = _floored_cholesky(params.latent_covs)

    PtPmu = np.einsum("nij,gj->ngi", data.PtP, mu)
    resid_sq = data.yty[:, None] - 2.0 * data.Pty @ mu.T + np.einsum("ngi,gi->ng", PtPmu, mu)
    shift = np.empty((data.N, params.G, p + r))
    shift[..., :p] = (data.Pty[:, None, :] - PtPmu) / s2
    quad0 = resid_sq / s2
    if r:
        xdev = data.x[:, None, :] - params.covariate_means[None, :, :]
        shift[..., p:] = xdev / s2x
        quad0 = quad0 + np.sum(xdev * xdev, axis=-1) / s2x
    precision = _blockdiag(data.PtP / s2, r, 1.0 / s2x)
    mean, cov, logdet, quad = gauss.factored_condition(C[None], precision[:, None], shift)

    if data.rebased is not None and np.any(data.rebased):
        idx = np.nonzero(data.rebased)[0]
        T = _blockdiag(data.T[idx], r, 1.0)
        Tinv = _blockdiag(data.Tinv[idx], r, 1.0)
        floored = C @ np.swapaxes(C, -1, -2)
        prior = T[:, None] @ floored[None] @ np.swapaxes(T, -1, -2)[:, None]
        prior = 0.5 * (prior + np.swapaxes(prior, -1, -2))
        try:
            Cb = np.linalg.cholesky(prior)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("re-based prior covariance is not positive definite") from exc
        zres = data.z[idx][:, None, :] - np.einsum("nij,gj->ngi", data.T[idx], mu)
        shift_b = shift[idx].copy()
        shift_b[..., :p] = zres / s2
        quad0_b = (data.resid0[idx][:, None] + np.sum(zres * zres, axis=-1)) / s2
        if r:
            quad0_b = quad0_b + np.sum(xdev[idx] ** 2, axis=-1) / s2x
        prec_b = _blockdiag(np.broadcast_to(np.eye(p) / s2, (p, p)), r, 1.0 / s2x)
        mean_b, cov_b, logdet_b, quad_b = gauss.factored_condition(Cb, prec_b, shift_b)
        mean[idx] = (Tinv[:, None] @ mean_b[..., None])[..., 0]
        cov[idx] = Tinv[:, None] @ cov_b @ np.swapaxes(Tinv, -1, -2)[:, None]
        logdet[idx] = logdet_b
        quad[idx] = quad_b
        quad0[idx] = quad0_b

    log_r = data.n * np.log(s2) + r * np.log(s2x)
    logdens = -0.5 * (((data.n + r) * gauss.LOG_2PI + log_r)[:, None] + logdet + quad0 - quad)
    bad = ~np.isfinite(logdens)
    if np.any(bad):
        i = int(np.nonzero(bad.any(axis=1))[0][0])
        raise NumericalError("non-finite component log density", subject_id=data.ids[i])
    return logdens, mean, cov


def component_log_densities(data: CurveData, params: ModelParams) -> NDArray:
    return conditional_moments(data, params)[0]


def _log_weights(params: ModelParams) -> NDArray:
    with np.errstate(divide="ignore"):
        return np.log(params.weights)


def observed_loglik(data: CurveData, params: ModelParams) -> float:
    """``sum_i log sum_k pi_k f_k(u_i)``."""
    logw = component_log_densities(data, params) + _log_weights(params)[None, :]
    per_subject = gauss.logsumexp(logw, axis=1)
    if not np.all(np.isfinite(per_subject)):
        i = int(np.nonzero(~np.isfinite(per_subject))[0][0])
        raise NumericalError("non-finite subject log likelihood", subject_id=data.ids[i])
    return float(np.sum(per_subject))


def posterior_probs(data: CurveData, params: ModelParams) -> PosteriorTable:
    logw = component_log_densities(data, params) + _log_weights(params)[None, :]
    return PosteriorTable.from_log_weights(logw, data.ids)


def marginal_loglik_subject(obs: CurveObservation, basis: ArrayLike, params: ModelParams, cluster: int) -> float:
    """``log f_k`` of one subject from its explicitly assembled covariance."""
    phi = np.asarray(basis, dtype=float)
    r = obs.r if params.r else 0
    if obs.r != params.r:
        raise ModelMismatchError(f"subject {obs.subject_id!r} has {obs.r} covariates, parameters model {params.r}")
    if phi.shape != (obs.n, params.p):
        raise InvalidSpecError("basis matrix does not match the subject and parameters")
    k = int(cluster)
    mu = params.cluster_means()[k]
    Delta = gauss.ridge_floor(params.latent_covs[k], COV_RIDGE)
    S = np.zeros((obs.n + r, params.p + r))
    S[: obs.n, : params.p] = phi
    S[obs.n :, params.p :] = np.eye(r)
    noise = np.concatenate([np.full(obs.n, params.sigma2), np.full(r, params.sigma2_x or 1.0)])
    u = obs.values if not r else np.concatenate([obs.values, obs.covariates])
    m = S[:, : params.p] @ mu
    if r:
        m = m + np.concatenate([np.zeros(obs.n), params.covariate_means[k]])
    return gauss.log_mvn_pdf(u, m, S @ Delta @ S.T + np.diag(noise), ridge=0.0)


def fitted_curves(
    obs: CurveObservation,
    params: ModelParams,
    posterior_row: ArrayLike,
    eval_grid: ArrayLike,
    spec: BasisSpec = DEFAULT_BASIS,
):
    """Cluster mean curves and the subject's predicted curve on ``eval_grid``.

    Returns ``(cluster_means, subject_curve)`` of shapes ``(G, m)`` and ``(m,)``.
    """
    from .modelselect import eta_hat

    grid = np.asarray(eval_grid, dtype=float)
    if np.any(grid < 0) or np.any(grid > 1):
        raise DomainError("evaluation grid must lie in [0, 1]")
    Phi = eval_basis_matrix(grid, spec)
    means = params.cluster_means() @ Phi.T
    eta = eta_hat(obs, params, posterior_row, spec)
    return means, Phi @ eta
