"""EM fitting of the functional mixture, with and without covariates.

The M-step is a sequence of closed-form block updates, each maximizing the
expected complete-data log likelihood with the E-step moments held fixed:

1. mixing weights,
2. latent covariances ``Gamma_k`` (or ``Delta_k``),
3. a few coordinate sweeps over ``lambda0``, each ``alpha_k`` and each
   column of ``Lambda``,
4. ``sigma2`` at the new mean structure,
5. covariate means ``upsilon_k`` and ``sigma2_x`` (covariate model only).

Every block update weakly increases the expected log likelihood, so the
observed log likelihood never decreases.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import InvalidSpecError, ModelMismatchError, NumericalError
from .kmeans import kmeans
from .mixmodel import (
    CurveData,
    MeanStructure,
    ModelParams,
    PosteriorTable,
    conditional_moments,
)
from .gauss import logsumexp
from .splinebasis import penalty_matrix

logger = logging.getLogger(__name__)

DEFAULT_PENALTY = 0.00014625
STARVED_WEIGHT = 1e-8


@dataclass(frozen=True)
class FitConfig:
    G: int = 2
    h: int | None = None
    max_iters: int = 500
    tol: float = 1e-3
    init_mode: str = "kmeans"
    kmeans_restarts: int = 10
    penalty_weight: float = DEFAULT_PENALTY
    ridge_floor: float = 1e-8
    inner_sweeps: int = 3
    seed: int = 0
    # divisor of the initial sigma2: number of subjects or of observations
    init_sigma_divisor: str = "subjects"

    def __post_init__(self):
        if self.G < 1:
            raise InvalidSpecError("need at least one cluster")
        if not self.tol > 0:
            raise InvalidSpecError("tolerance must be positive")
        if self.init_mode not in ("kmeans", "uniform"):
            raise InvalidSpecError(f"unknown init mode {self.init_mode!r}")
        if self.penalty_weight < 0 or self.ridge_floor < 0:
            raise InvalidSpecError("penalty weight and ridge floor must be nonnegative")
        if self.max_iters < 1 or self.inner_sweeps < 1:
            raise InvalidSpecError("max_iters and inner_sweeps must be positive")
        if self.init_sigma_divisor not in ("subjects", "observations"):
            raise InvalidSpecError(f"unknown init_sigma_divisor {self.init_sigma_divisor!r}")

    def resolved_h(self, p: int) -> int:
        """Rank of the cluster-offset loading, ``min(G - 1, p)`` by default."""
        top = min(self.G - 1, p)
        if self.h is None:
            return top
        if self.G == 1:
            return 0
        if not 1 <= self.h <= top:
            raise InvalidSpecError(f"h must lie in [1, {top}] for G={self.G}, got {self.h}")
        return int(self.h)

    @staticmethod
    def parse_init(text: str) -> dict:
        """Parse ``kmeans:<restarts>`` or ``uniform`` into config fields."""
        text = text.strip().lower()
        if text == "uniform":
            return {"init_mode": "uniform"}
        if text == "kmeans":
            return {"init_mode": "kmeans"}
        if text.startswith("kmeans:"):
            try:
                restarts = int(text.split(":", 1)[1])
            except ValueError:
                raise InvalidSpecError(f"bad restart count in {text!r}") from None
            if restarts < 1:
                raise InvalidSpecError("k-means needs at least one restart")
            return {"init_mode": "kmeans", "kmeans_restarts": restarts}
        raise InvalidSpecError(f"unknown init mode {text!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class EStepCache:
    resp: NDArray
    cond_mean: NDArray
    cond_cov: NDArray
    logdens: NDArray
    loglik: float


@dataclass
class InitState:
    coefficients: NDArray
    labels: NDArray
    pooled_cov: NDArray


@dataclass
class FitReport:
    params: ModelParams
    loglik_trace: NDArray
    iterations: int
    converged: bool
    posterior: PosteriorTable
    sigma_trace: NDArray = field(default_factory=lambda: np.zeros(0))
    reseeded: list = field(default_factory=list)
    config: FitConfig | None = None

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])

    def monotone_violations(self, slack: float = 1e-6) -> list:
        """Steps where the log likelihood fell by more than ``slack``.

        Step ``j`` compares ``loglik_trace[j]`` with ``loglik_trace[j - 1]``;
        steps that follow a cluster re-seed are exempt.
        """
        drops = np.nonzero(np.diff(self.loglik_trace) < -slack)[0] + 1
        return [int(j) for j in drops if int(j) not in self.reseeded]


def _floor_cov(cov: NDArray, rel: float) -> NDArray:
    cov = 0.5 * (cov + cov.T)
    d = cov.shape[0]
    if rel <= 0 or d == 0:
        return cov
    eps = rel * abs(np.trace(cov)) / d
    if eps == 0.0:
        eps = rel
    if np.linalg.eigvalsh(cov)[0] < eps:
        cov = cov + eps * np.eye(d)
    return cov


def _solve(A: NDArray, b: NDArray, what: str) -> NDArray:
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        pass
    scale = max(np.trace(A) / len(A), 1.0)
    try:
        return np.linalg.solve(A + 1e-10 * scale * np.eye(len(A)), b)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular normal equations for {what}") from exc


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def penalized_coefficients(data: CurveData, penalty_weight: float = DEFAULT_PENALTY) -> NDArray:
    """Per-subject spline coefficients penalizing the integrated squared second derivative."""
    P = penalty_matrix(data.spec, order=2)
    A = data.PtP + penalty_weight * P[None]
    coefs = np.empty_like(data.Pty)
    for i in range(data.N):
        try:
            coefs[i] = np.linalg.solve(A[i], data.Pty[i])
        except np.linalg.LinAlgError:
            coefs[i] = np.linalg.lstsq(A[i], data.Pty[i], rcond=None)[0]
    return coefs


def _initial_labels(coefs: NDArray, config: FitConfig, rng: np.random.Generator) -> NDArray:
    N, G = len(coefs), config.G
    if config.init_mode == "kmeans":
        return kmeans(coefs, G, restarts=config.kmeans_restarts, rng=rng).labels
    for _ in range(100):
        labels = rng.integers(0, G, size=N)
        if len(np.unique(labels)) == G:
            return labels
    raise NumericalError("uniform initialization left a cluster empty")


def _pooled_cov(X: NDArray, labels: NDArray, G: int) -> NDArray:
    centered = X.copy()
    for k in range(G):
        sel = labels == k
        centered[sel] -= X[sel].mean(axis=0)
    dof = len(X) - G if len(X) > G else len(X)
    return centered.T @ centered / dof


def init_params(
    data: CurveData,
    config: FitConfig,
    rng: np.random.Generator | int | None = None,
    return_state: bool = False,
):
    """Starting values from penalized per-subject spline fits.

    Labels come from k-means on the coefficients (best of several restarts)
    or from a uniform random assignment; weights, means, covariances and
    ``sigma2`` are then computed from the labelled coefficients.
    """
    N, p, r, G = data.N, data.p, data.r, config.G
    if N < G:
        raise InvalidSpecError(f"cannot form {G} clusters from {N} subjects")
    rng = np.random.default_rng(config.seed if rng is None else rng)
    h = config.resolved_h(p)
    coefs = penalized_coefficients(data, config.penalty_weight)
    labels = np.zeros(N, dtype=int) if G == 1 else _initial_labels(coefs, config, rng)

    counts = np.bincount(labels, minlength=G).astype(float)
    weights = counts / N
    lambda0 = coefs.mean(axis=0)
    centers = np.stack([coefs[labels == k].mean(axis=0) for k in range(G)])
    if h:
        offsets = centers - lambda0
        evals, evecs = np.linalg.eigh(offsets.T @ offsets)
        loading = evecs[:, ::-1][:, :h]
        alphas = offsets @ loading
    else:
        loading = np.zeros((p, 0))
        alphas = np.zeros((G, 0))
    mean = MeanStructure(lambda0, loading, alphas).normalized()

    gamma = _floor_cov(_pooled_cov(coefs, labels, G), config.ridge_floor)
    mu = mean.cluster_means()[labels]
    resid = data.yty - 2.0 * np.sum(mu * data.Pty, axis=1) + np.einsum("ni,nij,nj->n", mu, data.PtP, mu)
    divisor = N if config.init_sigma_divisor == "subjects" else float(np.sum(data.n))
    sigma2 = float(np.sum(np.maximum(resid, 0.0)) / divisor)
    sigma2 = max(sigma2, 1e-8 * float(np.mean(data.yty / data.n)) + 1e-300)

    if r:
        cov_means = np.stack([data.x[labels == k].mean(axis=0) for k in range(G)])
        D = _pooled_cov(data.x, labels, G)
        xres = data.x - cov_means[labels]
        sigma2_x = float(np.sum(xres**2) / (N * r))
        sigma2_x = max(sigma2_x, 1e-8 * float(np.mean(data.x**2)) + 1e-300)
        Delta = np.zeros((p + r, p + r))
        Delta[:p, :p] = gamma
        Delta[p:, p:] = D
        pooled = _floor_cov(Delta, config.ridge_floor)
    else:
        cov_means, sigma2_x = None, None
        pooled = gamma
    covs = np.repeat(pooled[None], G, axis=0)
    params = ModelParams(weights, mean, covs, sigma2, sigma2_x, cov_means).validate()
    if return_state:
        return params, InitState(coefs, labels, pooled)
    return params


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------


def e_step(data: CurveData, params: ModelParams) -> EStepCache:
    """Responsibilities and conditional moments of the latent deviations."""
    logdens, cond_mean, cond_cov = conditional_moments(data, params)
    with np.errstate(divide="ignore"):
        logw = logdens + np.log(params.weights)[None, :]
    ll = logsumexp(logw, axis=1)
    if not np.all(np.isfinite(ll)):
        i = int(np.nonzero(~np.isfinite(ll))[0][0])
        raise NumericalError("non-finite subject log likelihood", subject_id=data.ids[i])
    resp = np.exp(logw - ll[:, None])
    resp /= resp.sum(axis=1, keepdims=True)
    return EStepCache(resp, cond_mean, cond_cov, logdens, float(ll.sum()))


# ---------------------------------------------------------------------------
# M-step block updates
# ---------------------------------------------------------------------------


def update_weights(cache: EStepCache) -> NDArray:
    return cache.resp.mean(axis=0)


def update_latent_covs(cache: EStepCache, previous: NDArray, ridge_floor: float = 1e-8) -> NDArray:
    """``sum_i w_ik (V_ik + m_ik m_ik^T) / sum_i w_ik`` per cluster.

    Starved clusters keep their previous covariance.
    """
    w = cache.resp
    m = cache.cond_mean
    totals = w.sum(axis=0)
    second = np.einsum("nk,nkij->kij", w, cache.cond_cov) + np.einsum("nk,nki,nkj->kij", w, m, m)
    out = previous.copy()
    for k in range(w.shape[1]):
        if totals[k] / len(w) < STARVED_WEIGHT:
            continue
        out[k] = _floor_cov(second[k] / totals[k], ridge_floor)
    return out


def update_lambda0(data: CurveData, cache: EStepCache, mean: MeanStructure) -> NDArray:
    p = data.p
    gam = cache.cond_mean[..., :p]
    offsets = (mean.alphas @ mean.loading.T)[None] + gam
    weighted = np.einsum("nk,nkj->nj", cache.resp, offsets)
    rhs = data.Pty.sum(axis=0) - np.einsum("nij,nj->i", data.PtP, weighted)
    return _solve(data.PtP.sum(axis=0), rhs, "lambda0")


def update_alpha(data: CurveData, cache: EStepCache, mean: MeanStructure, k: int) -> NDArray:
    p = data.p
    w = cache.resp[:, k]
    if w.mean() < STARVED_WEIGHT:
        return mean.alphas[k].copy()
    Lam = mean.loading
    gam = cache.cond_mean[:, k, :p]
    A = Lam.T @ np.einsum("n,nij->ij", w, data.PtP) @ Lam
    target = mean.lambda0[None, :] + gam
    rhs = Lam.T @ (w @ data.Pty - np.einsum("n,nij,nj->i", w, data.PtP, target))
    return _solve(A, rhs, f"alpha[{k}]")


def update_loading_column(data: CurveData, cache: EStepCache, mean: MeanStructure, col: int) -> NDArray:
    p = data.p
    w = cache.resp
    a = mean.alphas[:, col]
    coef_sq = w @ (a**2)
    if np.all(coef_sq <= 0):
        return mean.loading[:, col].copy()
    A = np.einsum("n,nij->ij", coef_sq, data.PtP)
    others = mean.cluster_means() - np.outer(a, mean.loading[:, col])
    target = others[None] + cache.cond_mean[..., :p]
    weighted = np.einsum("nk,k,nkj->nj", w, a, target)
    rhs = (w @ a) @ data.Pty - np.einsum("nij,nj->i", data.PtP, weighted)
    if np.trace(A) <= 1e-300:
        return mean.loading[:, col].copy()
    return _solve(A, rhs, f"Lambda column {col}")


def expected_residual_sq(data: CurveData, cache: EStepCache, mean: MeanStructure) -> NDArray:
    """``tau_ik = E||y_i - phi_i (mu_k + gamma_i)||^2`` under the cached moments."""
    p = data.p
    e = mean.cluster_means()[None] + cache.cond_mean[..., :p]
    Vg = cache.cond_cov[..., :p, :p]
    tau = (
        data.yty[:, None]
        - 2.0 * np.einsum("nkj,nj->nk", e, data.Pty)
        + np.einsum("nki,nij,nkj->nk", e, data.PtP, e)
        + np.einsum("nij,nkji->nk", data.PtP, Vg)
    )
    if data.rebased is not None and np.any(data.rebased):
        idx = np.nonzero(data.rebased)[0]
        T = data.T[idx]
        dz = data.z[idx][:, None, :] - np.einsum("nij,nkj->nki", T, e[idx])
        TVT = T[:, None] @ Vg[idx] @ np.swapaxes(T, -1, -2)[:, None]
        tau[idx] = data.resid0[idx][:, None] + np.sum(dz * dz, axis=-1) + np.trace(TVT, axis1=-2, axis2=-1)
    return np.maximum(tau, 0.0)


def update_sigma2(data: CurveData, cache: EStepCache, mean: MeanStructure) -> float:
    tau = expected_residual_sq(data, cache, mean)
    return float(np.sum(cache.resp * tau) / np.sum(data.n))


def update_covariate_means(data: CurveData, cache: EStepCache, previous: NDArray) -> NDArray:
    p = data.p
    w = cache.resp
    totals = w.sum(axis=0)
    delta = cache.cond_mean[..., p:]
    sums = np.einsum("nk,nkj->kj", w, data.x[:, None, :] - delta)
    out = previous.copy()
    ok = totals / len(w) >= STARVED_WEIGHT
    out[ok] = sums[ok] / totals[ok, None]
    return out


def update_sigma2_x(data: CurveData, cache: EStepCache, covariate_means: NDArray) -> float:
    """``(1 / (N r)) sum_ik w_ik (||x_i - upsilon_k - delta_ik||^2 + tr V_delta)``."""
    p, r = data.p, data.r
    dev = data.x[:, None, :] - covariate_means[None] - cache.cond_mean[..., p:]
    Vd = cache.cond_cov[..., p:, p:]
    b = np.sum(dev * dev, axis=-1) + np.trace(Vd, axis1=-2, axis2=-1)
    return float(np.sum(cache.resp * b) / (data.N * r))


def update_mean_structure(data: CurveData, cache: EStepCache, mean: MeanStructure, sweeps: int = 3) -> MeanStructure:
    """Coordinate sweeps: ``lambda0``, then every ``alpha_k``, then every column of ``Lambda``."""
    mean = MeanStructure(mean.lambda0.copy(), mean.loading.copy(), mean.alphas.copy())
    for _ in range(sweeps):
        mean.lambda0 = update_lambda0(data, cache, mean)
        if mean.h == 0:
            break
        for k in range(mean.G):
            mean.alphas[k] = update_alpha(data, cache, mean, k)
        for col in range(mean.h):
            mean.loading[:, col] = update_loading_column(data, cache, mean, col)
    return mean


def _m_step(data: CurveData, cache: EStepCache, prev: ModelParams, config: FitConfig) -> ModelParams:
    weights = update_weights(cache)
    covs = update_latent_covs(cache, prev.latent_covs, config.ridge_floor)
    mean = update_mean_structure(data, cache, prev.mean, config.inner_sweeps)
    sigma2 = update_sigma2(data, cache, mean)
    cov_means, sigma2_x = None, None
    if data.r:
        cov_means = update_covariate_means(data, cache, prev.covariate_means)
        sigma2_x = update_sigma2_x(data, cache, cov_means)
    if not (np.isfinite(sigma2) and sigma2 > 0):
        raise NumericalError("sigma2 update is not positive")
    if data.r and not (np.isfinite(sigma2_x) and sigma2_x > 0):
        raise NumericalError("sigma2_x update is not positive")
    return ModelParams(weights, mean.normalized(), covs, sigma2, sigma2_x, cov_means)


def m_step_nocov(data: CurveData, cache: EStepCache, params_prev: ModelParams, config: FitConfig | None = None) -> ModelParams:
    """Closed-form M-step of the curves-only model."""
    if data.r or params_prev.r:
        raise ModelMismatchError("m_step_nocov called with covariates present")
    return _m_step(data, cache, params_prev, config or FitConfig(G=params_prev.G))


def m_step_cov(data: CurveData, cache: EStepCache, params_prev: ModelParams, config: FitConfig | None = None) -> ModelParams:
    """Closed-form M-step of the model with covariates; ``r = 0`` reduces to :func:`m_step_nocov`."""
    if data.r != params_prev.r:
        raise ModelMismatchError("data and parameters disagree on the covariate dimension")
    return _m_step(data, cache, params_prev, config or FitConfig(G=params_prev.G))


# ---------------------------------------------------------------------------
# fitting loop
# ---------------------------------------------------------------------------


def _reseed(params: ModelParams, cache: EStepCache, starved: NDArray, state: InitState, data: CurveData) -> ModelParams:
    """Move starved clusters onto the least well explained subjects."""
    params = params.copy()
    mean = params.mean
    order = np.argsort(cache.resp.max(axis=1), kind="stable")
    weights = params.weights.copy()
    for j, k in enumerate(np.nonzero(starved)[0]):
        i = int(order[j % len(order)])
        if mean.h:
            mean.alphas[k] = mean.loading.T @ (state.coefficients[i] - mean.lambda0)
        if params.covariate_means is not None:
            params.covariate_means[k] = data.x[i]
        params.latent_covs[k] = state.pooled_cov
        weights[k] = 1.0 / data.N
        logger.warning("re-seeded starved cluster %d at subject %r", k, data.ids[i])
    params.weights = weights / weights.sum()
    params.mean = mean.normalized()
    return params


def fit(data: CurveData, config: FitConfig, init: ModelParams | None = None, m_step=None) -> FitReport:
    """Run EM from :func:`init_params` (or ``init``) until the relative change
    of ``sigma2 + sigma2_x`` drops below ``config.tol``.

    ``m_step`` defaults to :func:`m_step_nocov` without covariates and
    :func:`m_step_cov` with them.
    """
    if m_step is None:
        m_step = m_step_cov if data.r else m_step_nocov
    rng = np.random.default_rng(config.seed)
    params, state = init_params(data, config, rng, return_state=True)
    if init is not None:
        params = init.copy().validate()
    if params.r != data.r:
        raise ModelMismatchError("initial parameters and data disagree on covariates")
    trace, sigmas, reseeded = [], [params.sigma_sum], []
    converged = False
    it = 0
    try:
        for it in range(1, config.max_iters + 1):
            cache = e_step(data, params)
            trace.append(cache.loglik)
            starved = cache.resp.mean(axis=0) < STARVED_WEIGHT
            if params.G > 1 and np.any(starved):
                params = _reseed(params, cache, starved, state, data)
                reseeded.append(len(trace))
                cache = e_step(data, params)
            new = m_step(data, cache, params, config)
            change = abs(new.sigma_sum - params.sigma_sum) / params.sigma_sum
            params = new
            sigmas.append(params.sigma_sum)
            if change < config.tol:
                converged = True
                break
        final = e_step(data, params)
    except NumericalError as exc:
        raise NumericalError(str(exc), iteration=it) from exc
    trace.append(final.loglik)
    with np.errstate(divide="ignore"):
        logw = final.logdens + np.log(params.weights)[None, :]
    posterior = PosteriorTable.from_log_weights(logw, data.ids)
    if not converged:
        logger.warning("EM stopped at max_iters=%d without converging", config.max_iters)
    return FitReport(
        params=params,
        loglik_trace=np.array(trace),
        iterations=it,
        converged=converged,
        posterior=posterior,
        sigma_trace=np.array(sigmas),
        reseeded=reseeded,
        config=config,
    )
