import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funclust.errors import DomainError, ModelMismatchError
from funclust.mixmodel import (
    CurveData,
    MeanStructure,
    ModelParams,
    PosteriorTable,
    component_log_densities,
    conditional_moments,
    fitted_curves,
    marginal_loglik_subject,
    observed_loglik,
    posterior_probs,
)
from funclust.preprocess import CurveObservation
from funclust.splinebasis import DEFAULT_BASIS, eval_basis_matrix

from conftest import (
    dense_component_loglik,
    dense_loglik,
    partitioned_posterior,
    random_observations,
    random_params,
    random_problem,
    spec_for_p,
)


def test_residual_free_isotropic_density():
    t = np.linspace(0, 1, 9)
    phi = eval_basis_matrix(t)
    lam = np.linspace(-1, 1, 8)
    obs = CurveObservation("a", t, phi @ lam)
    params = ModelParams([1.0], MeanStructure(lam, np.zeros((8, 0)), np.zeros((1, 0))), 1e-12 * np.eye(8)[None], 1.0)
    val = marginal_loglik_subject(obs, phi, params, 0)
    assert val == pytest.approx(-4.5 * np.log(2 * np.pi), abs=1e-4)


@pytest.mark.parametrize("n,p,r", [(5, 3, 0), (4, 3, 2), (9, 8, 3), (3, 8, 0)])
def test_subject_density_matches_dense_oracle(rng, n, p, r):
    spec = spec_for_p(p)
    params = random_params(rng, 2, p, r)
    obs = random_observations(rng, 1, spec, r, (n, n))[0]
    phi = eval_basis_matrix(obs.times, spec)
    for k in range(2):
        assert marginal_loglik_subject(obs, phi, params, k) == pytest.approx(
            dense_component_loglik(obs, spec, params, k), abs=1e-9
        )


def test_subject_density_rejects_mismatch(rng):
    params = random_params(rng, 2, 8, 2)
    obs = random_observations(rng, 1, DEFAULT_BASIS, 0)[0]
    with pytest.raises(ModelMismatchError):
        marginal_loglik_subject(obs, eval_basis_matrix(obs.times), params, 0)
    data = CurveData.from_observations([obs])
    with pytest.raises(ModelMismatchError):
        observed_loglik(data, params)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.sampled_from([2, 3, 4, 8]), st.sampled_from([0, 1, 3]))
def test_batched_loglik_matches_dense(seed, G, p, r):
    data, params = random_problem(seed, N=6, G=G, p=p, r=r, n_range=(2, 12))
    assert observed_loglik(data, params) == pytest.approx(dense_loglik(data, params), abs=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.sampled_from([2, 3, 8]), st.sampled_from([0, 2]))
def test_conditional_moments_match_partitioned_oracle(seed, G, p, r):
    data, params = random_problem(seed, N=4, G=G, p=p, r=r, n_range=(2, 12))
    _, mean, cov = conditional_moments(data, params)
    for i, obs in enumerate(data.observations):
        for k in range(G):
            m_ref, V_ref = partitioned_posterior(obs, data.spec, params, k)
            np.testing.assert_allclose(mean[i, k], m_ref, atol=1e-8)
            np.testing.assert_allclose(cov[i, k], V_ref, atol=1e-8)


@pytest.mark.parametrize("r", [0, 3])
def test_rebased_path_matches_direct(r):
    rng = np.random.default_rng(7)
    params = random_params(rng, 3, 8, r)
    obs = random_observations(rng, 25, DEFAULT_BASIS, r, (4, 30), params)
    direct = CurveData.from_observations(obs)
    rebased = CurveData.from_observations(obs, rebase=True)
    assert rebased.rebased.any() and not rebased.rebased.all()
    a = conditional_moments(direct, params)
    b = conditional_moments(rebased, params)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, atol=1e-8)


def test_duplicating_subjects_doubles_loglik():
    data, params = random_problem(3, N=5, G=2, p=4, r=1)
    twice = CurveData.from_observations(data.observations * 2, data.spec)
    assert observed_loglik(twice, params) == pytest.approx(2 * observed_loglik(data, params), rel=1e-13)


def test_naive_summation_oracle():
    data, params = random_problem(11, N=10, G=3, p=3)
    logf = component_log_densities(data, params)
    naive = np.sum(np.log(np.sum(params.weights * np.exp(logf), axis=1)))
    assert observed_loglik(data, params) == pytest.approx(naive, abs=1e-10)


def test_single_cluster_reduces_to_component():
    data, params = random_problem(5, N=6, G=1, p=4, r=2)
    logf = component_log_densities(data, params)
    assert observed_loglik(data, params) == pytest.approx(logf.sum(), abs=1e-12)
    post = posterior_probs(data, params)
    np.testing.assert_array_equal(post.probs, 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.permutations(range(3)))
def test_relabeling_invariance(seed, perm):
    data, params = random_problem(seed, N=5, G=3, p=4, r=1)
    a = observed_loglik(data, params)
    b = observed_loglik(data, params.permuted(list(perm)))
    assert a == pytest.approx(b, abs=1e-8)
    pa = posterior_probs(data, params).probs
    pb = posterior_probs(data, params.permuted(list(perm))).probs
    np.testing.assert_allclose(pb, pa[:, list(perm)], atol=1e-10)


def test_posterior_rows_and_shift_invariance():
    data, params = random_problem(9, N=8, G=3, p=8, r=0, n_range=(4, 20))
    logw = component_log_densities(data, params) + np.log(params.weights)
    post = PosteriorTable.from_log_weights(logw)
    np.testing.assert_allclose(post.probs.sum(axis=1), 1.0, atol=1e-12)
    shifted = PosteriorTable.from_log_weights(logw + np.arange(8)[:, None] * 50.0)
    np.testing.assert_allclose(shifted.probs, post.probs, atol=1e-10)
    assert np.all(post.max_prob == post.probs[np.arange(8), post.assignment])


def test_tie_goes_to_lowest_index():
    t = np.linspace(0, 1, 10)
    mean = MeanStructure(np.zeros(8), np.eye(8)[:, :1], np.array([[1.0], [-1.0]]))
    params = ModelParams([0.5, 0.5], mean, np.repeat(0.1 * np.eye(8)[None], 2, axis=0), 0.2)
    data = CurveData.from_observations([CurveObservation("mid", t, np.zeros(10))])
    post = posterior_probs(data, params)
    np.testing.assert_allclose(post.probs, [[0.5, 0.5]], atol=1e-12)
    assert post.assignment[0] == 0


def test_normalized_mean_structure_keeps_cluster_means(rng):
    ms = MeanStructure(rng.normal(size=6), rng.normal(size=(6, 3)), rng.normal(size=(4, 3)))
    norm = ms.normalized()
    np.testing.assert_allclose(norm.cluster_means(), ms.cluster_means(), atol=1e-12)
    np.testing.assert_allclose(norm.alphas.sum(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(norm.loading.T @ norm.loading, np.eye(3), atol=1e-12)


def test_params_round_trip(rng):
    params = random_params(rng, 3, 8, 2)
    back = ModelParams.from_dict(params.to_dict())
    for name in ("weights", "latent_covs", "covariate_means"):
        np.testing.assert_array_equal(getattr(back, name), getattr(params, name))
    np.testing.assert_array_equal(back.cluster_means(), params.cluster_means())
    assert back.sigma2 == params.sigma2 and back.sigma2_x == params.sigma2_x


def test_fitted_curves_limits():
    t = np.linspace(0, 1, 15)
    phi = eval_basis_matrix(t)
    mean = MeanStructure(np.zeros(8), np.linspace(-1, 1, 8)[:, None] / 2, np.array([[1.0], [-1.0]]))
    params = ModelParams([0.5, 0.5], mean, np.repeat(1e-9 * np.eye(8)[None], 2, axis=0), 0.01)
    grid = np.linspace(0, 1, 101)
    obs = CurveObservation("a", t, phi @ params.cluster_means()[0] + 0.3)
    means, curve = fitted_curves(obs, params, [0.25, 0.75], grid)
    # with no within-cluster deviation the subject curve is the posterior mix of the means
    np.testing.assert_allclose(curve, 0.25 * means[0] + 0.75 * means[1], atol=1e-6)

    params2 = ModelParams([0.5, 0.5], mean, np.repeat(0.5 * np.eye(8)[None], 2, axis=0), 0.01)
    exact = CurveObservation("b", t, phi @ params2.cluster_means()[1])
    means, curve = fitted_curves(exact, params2, [0.0, 1.0], grid)
    np.testing.assert_allclose(curve, means[1], atol=1e-6)
    _, at0 = fitted_curves(exact, params2, [0.0, 1.0], [0.0])
    assert at0[0] == pytest.approx(params2.cluster_means()[1][0], abs=1e-6)
    with pytest.raises(DomainError):
        fitted_curves(exact, params2, [0.0, 1.0], [1.2])
