import numpy as np
import pytest

from funclust.errors import InvalidSpecError
from funclust.splinebasis import eval_basis_matrix
from funclust.synth import SynthSpec, simulate, well_separated_spec


def test_noise_free_subjects_sit_on_their_mean():
    spec = well_separated_spec(G=3, N=40)
    spec.latent_covs[:] = 0.0
    spec.sigma2 = 0.0
    sim = simulate(spec, seed=1)
    for obs, k in zip(sim.observations, sim.labels):
        np.testing.assert_allclose(obs.values, eval_basis_matrix(obs.times) @ spec.means[k], atol=1e-12)


def test_covariate_means_recovered_within_standard_errors():
    spec = well_separated_spec(G=3, N=1000, r=2)
    sim = simulate(spec, seed=5)
    X = np.array([o.covariates for o in sim.observations])
    for k in range(3):
        sel = sim.labels == k
        sd = np.sqrt(np.diag(spec.latent_covs[k])[-2:] + spec.sigma2_x)
        se = sd / np.sqrt(sel.sum())
        assert np.all(np.abs(X[sel].mean(axis=0) - spec.covariate_means[k]) < 3 * se)


def test_mean_curves_are_separated():
    spec = well_separated_spec(G=3, sigma=0.1, separation=10.0)
    grid = np.linspace(0, 1, 201)
    curves = spec.means @ eval_basis_matrix(grid).T
    for a in range(3):
        for b in range(a):
            assert np.sqrt(np.mean((curves[a] - curves[b]) ** 2)) >= 10 * 0.1 - 1e-12


def test_seeded_generation_repeats():
    a = simulate(well_separated_spec(N=30, r=1), seed=9)
    b = simulate(well_separated_spec(N=30, r=1), seed=9)
    np.testing.assert_array_equal(a.labels, b.labels)
    for x, y in zip(a.observations, b.observations):
        np.testing.assert_array_equal(x.values, y.values)
        np.testing.assert_array_equal(x.covariates, y.covariates)


def test_invalid_shapes_rejected():
    with pytest.raises(InvalidSpecError):
        SynthSpec(weights=[0.5, 0.5], means=np.zeros((2, 7)), latent_covs=np.zeros((2, 7, 7)), sigma2=1.0)
    with pytest.raises(InvalidSpecError):
        SynthSpec(weights=[0.5, 0.6], means=np.zeros((2, 8)), latent_covs=np.zeros((2, 8, 8)), sigma2=1.0)
    with pytest.raises(InvalidSpecError):
        SynthSpec(weights=[1.0], means=np.zeros((1, 8)), latent_covs=np.zeros((1, 8, 8)), sigma2=1.0, n_range=(1, 3))
