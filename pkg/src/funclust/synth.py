"""Sampling curves (and covariates) from the mixture with known parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import InvalidSpecError
from .preprocess import CurveObservation
from .splinebasis import DEFAULT_BASIS, BasisSpec, eval_basis_matrix


@dataclass
class SynthSpec:
    """Generator parameters.

    ``means`` holds the cluster mean spline coefficients ``(G, p)``;
    ``latent_covs`` the covariances of ``(gamma, delta)``, shape ``(G, p + r, p + r)``.
    """

    weights: NDArray
    means: NDArray
    latent_covs: NDArray
    sigma2: float
    N: int = 200
    n_range: tuple = (10, 30)
    sigma2_x: float = 0.0
    covariate_means: NDArray | None = None
    basis: BasisSpec = field(default=DEFAULT_BASIS)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.latent_covs = np.asarray(self.latent_covs, dtype=float)
        if self.covariate_means is not None:
            self.covariate_means = np.asarray(self.covariate_means, dtype=float).reshape(self.G, -1)
        self.validate()

    @property
    def G(self) -> int:
        return len(self.weights)

    @property
    def p(self) -> int:
        return self.means.shape[1]

    @property
    def r(self) -> int:
        return 0 if self.covariate_means is None else self.covariate_means.shape[1]

    def validate(self) -> None:
        G, p, r = self.G, self.p, self.r
        if np.any(self.weights < 0) or not np.isclose(self.weights.sum(), 1.0):
            raise InvalidSpecError("weights must lie on the simplex")
        if self.means.shape != (G, p) or p != self.basis.p:
            raise InvalidSpecError(f"means must have shape ({G}, {self.basis.p})")
        if self.latent_covs.shape != (G, p + r, p + r):
            raise InvalidSpecError(f"latent covariances must have shape {(G, p + r, p + r)}")
        if self.sigma2 < 0 or self.sigma2_x < 0:
            raise InvalidSpecError("noise variances must be nonnegative")
        lo, hi = self.n_range
        if not 2 <= lo <= hi:
            raise InvalidSpecError("n_range must satisfy 2 <= min <= max")
        if self.N < 1:
            raise InvalidSpecError("N must be positive")


@dataclass
class SynthData:
    observations: list
    labels: NDArray
    spec: SynthSpec

    @property
    def N(self) -> int:
        return len(self.observations)


def simulate(spec: SynthSpec, seed=None) -> SynthData:
    """Draw ``spec.N`` subjects on evenly spaced grids ``j / (n - 1)``."""
    rng = np.random.default_rng(seed)
    p, r = spec.p, spec.r
    labels = rng.choice(spec.G, size=spec.N, p=spec.weights)
    lo, hi = spec.n_range
    sizes = rng.integers(lo, hi + 1, size=spec.N)
    obs = []
    for i, (k, n) in enumerate(zip(labels, sizes)):
        t = np.arange(n) / (n - 1.0)
        phi = eval_basis_matrix(t, spec.basis)
        xi = rng.multivariate_normal(np.zeros(p + r), spec.latent_covs[k], method="eigh")
        y = phi @ (spec.means[k] + xi[:p]) + np.sqrt(spec.sigma2) * rng.standard_normal(n)
        x = None
        if r:
            x = spec.covariate_means[k] + xi[p:] + np.sqrt(spec.sigma2_x) * rng.standard_normal(r)
        names = tuple(f"x{j + 1}" for j in range(r))
        obs.append(CurveObservation(f"s{i:05d}", t, y, x, names))
    return SynthData(obs, labels, spec)


def well_separated_spec(
    G: int = 3,
    N: int = 500,
    r: int = 0,
    sigma: float = 0.1,
    separation: float = 10.0,
    latent_sd: float = 0.1,
    n_range: tuple = (15, 30),
    basis: BasisSpec = DEFAULT_BASIS,
) -> SynthSpec:
    """Clusters whose mean curves are at least ``separation`` noise SDs apart.

    The distance between two mean curves is their root mean square
    difference on a fine grid. Latent deviations are isotropic with standard
    deviation ``latent_sd`` per coefficient; covariates (``r > 0``) get
    cluster means spaced like the curves and a mild correlation with the
    curve deviations.
    """
    p = basis.p
    grid = np.linspace(0.0, 1.0, 201)
    Phi = eval_basis_matrix(grid, basis)
    g = np.linspace(0.0, 1.0, p)
    shapes = np.stack([np.sin(2 * np.pi * (k + 1) * g / 2 + k) for k in range(G)])
    shapes -= shapes.mean(axis=0)
    if G == 1:
        shapes = np.sin(2 * np.pi * g)[None]
    gaps = [np.sqrt(np.mean((Phi @ (shapes[a] - shapes[b])) ** 2)) for a in range(G) for b in range(a)]
    scale = separation * sigma / min(gaps) if gaps else 1.0
    means = shapes * scale
    d = p + r
    covs = np.repeat((latent_sd**2 * np.eye(d))[None], G, axis=0)
    cov_means = None
    if r:
        cov_means = np.zeros((G, r))
        for k in range(G):
            cov_means[k] = 2.0 * k * np.ones(r) + np.arange(r)
        for k in range(G):
            covs[k, p:, p:] = 0.25 * np.eye(r)
            covs[k, 0, p] = covs[k, p, 0] = 0.5 * latent_sd * 0.5
    return SynthSpec(
        weights=np.full(G, 1.0 / G),
        means=means,
        latent_covs=covs,
        sigma2=sigma**2,
        N=N,
        n_range=n_range,
        sigma2_x=0.25 if r else 0.0,
        covariate_means=cov_means,
        basis=basis,
    )
