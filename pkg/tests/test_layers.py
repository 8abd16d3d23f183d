import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aqdgp import autodiff as ad
from aqdgp.errors import DimensionError
from aqdgp.kernels import RBFKernel
from aqdgp.layers import SVGPLayer, skip_matrix


def make_layer(rng, M=4, d_in=2, d_out=2, random_q=True):
    Z = rng.normal(size=(M, d_in))
    layer = SVGPLayer(Z, d_out, kernel=RBFKernel(d_in, variance=1.3,
                                                 lengthscales=rng.uniform(0.5, 1.5, d_in)))
    if random_q:
        layer.q_mu.data = rng.normal(size=(M, d_out))
        L = np.tril(rng.normal(scale=0.3, size=(d_out, M, M)), -1)
        L += np.stack([np.diag(rng.uniform(0.3, 1.2, M)) for _ in range(d_out)])
        layer.set_q_sqrt(L)
    return layer


def dense_moments(layer, F):
    """The predictive moments via explicit inverses."""
    Z = layer.Z.data
    k = layer.kernel
    Kzz = k.matrix(Z).data
    Kzz = Kzz + layer.jitter * np.mean(np.diag(Kzz)) * np.eye(len(Z))
    Kzz_inv = np.linalg.inv(Kzz)
    Lz = np.linalg.cholesky(Kzz)
    Kfz = k.matrix(F, Z).data
    kff = np.array([k.eval(f, f) for f in F])
    S = layer.q_sqrt().data
    mu = F @ layer.mean_weights + Kfz @ Kzz_inv @ Lz @ layer.q_mu.data
    var = np.empty((len(F), layer.output_dim))
    for j in range(layer.output_dim):
        Sj = Lz @ S[j] @ S[j].T @ Lz.T
        var[:, j] = (kff - np.einsum("nm,mk,nk->n", Kfz, Kzz_inv, Kfz)
                     + np.einsum("nm,mk,kl,nl->n", Kfz, Kzz_inv, Sj @ Kzz_inv, Kfz))
    return mu, var


def dense_kl(layer):
    M = layer.num_inducing
    S = layer.q_sqrt().data
    total = 0.0
    for j in range(layer.output_dim):
        Sj = S[j] @ S[j].T
        m = layer.q_mu.data[:, j]
        total += 0.5 * (np.trace(Sj) + m @ m - M - np.log(np.linalg.det(Sj)))
    return total


def test_skip_matrix_shapes():
    np.testing.assert_array_equal(skip_matrix(3, 3), np.eye(3))
    np.testing.assert_array_equal(skip_matrix(3, 1), [[1.0], [0.0], [0.0]])
    np.testing.assert_array_equal(skip_matrix(2, 3), [[1.0, 0, 0], [0, 1.0, 0]])


def test_whitened_prior_recovers_gp_prior():
    rng = np.random.default_rng(0)
    layer = make_layer(rng, M=5, d_in=2, d_out=2, random_q=False)
    F = rng.normal(size=(6, 2))
    mu, var = layer.predict_moments(F)
    np.testing.assert_allclose(mu.data, F @ layer.mean_weights, atol=1e-12)
    np.testing.assert_allclose(var.data, layer.kernel.variance, rtol=1e-10)


def test_vanishing_kernel_variance_is_pure_skip():
    rng = np.random.default_rng(1)
    layer = make_layer(rng, d_in=2, d_out=2)
    layer.kernel.log_variance.data = np.array(np.log(1e-14))
    F = rng.normal(size=(3, 2))
    mu, var = layer.predict_moments(F)
    np.testing.assert_allclose(mu.data, F, atol=1e-6)
    assert np.max(var.data) <= 1e-12


def test_moments_match_dense_algebra():
    rng = np.random.default_rng(2)
    layer = make_layer(rng, M=4, d_in=2, d_out=2)
    F = rng.normal(size=(3, 2))
    mu, var = layer.predict_moments(F)
    mu_ref, var_ref = dense_moments(layer, F)
    assert np.max(np.abs(mu.data - mu_ref)) < 1e-8
    assert np.max(np.abs(var.data - var_ref)) < 1e-8


def test_batched_inputs_match_per_sample_evaluation():
    rng = np.random.default_rng(3)
    layer = make_layer(rng, M=5, d_in=2, d_out=3)
    F = rng.normal(size=(4, 6, 2))
    mu, var = layer.predict_moments(F)
    for s in range(4):
        mu_s, var_s = layer.predict_moments(F[s])
        np.testing.assert_allclose(mu.data[s], mu_s.data, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(var.data[s], var_s.data, rtol=1e-12, atol=1e-14)


def test_input_width_checked():
    layer = make_layer(np.random.default_rng(4))
    with pytest.raises(DimensionError):
        layer.predict_moments(np.zeros((3, 5)))


def test_duplicate_inducing_rows_rejected():
    with pytest.raises(DimensionError):
        SVGPLayer(np.zeros((2, 2)), 1)


def test_sample_with_zero_eps_is_mean():
    rng = np.random.default_rng(5)
    layer = make_layer(rng)
    F = rng.normal(size=(4, 2))
    mu, _ = layer.predict_moments(F)
    np.testing.assert_array_equal(layer.sample(F, np.zeros((4, 2))).data, mu.data)


def test_sample_monte_carlo_moments():
    rng = np.random.default_rng(6)
    layer = make_layer(rng, d_in=2, d_out=1)
    F = rng.normal(size=(1, 2))
    mu, var = layer.predict_moments(F)
    draws = 100_000
    eps = rng.standard_normal((draws, 1, 1))
    samples = layer.sample(F, eps).data.ravel()
    se = np.sqrt(var.data.item() / draws)
    assert abs(samples.mean() - mu.data.item()) < 4 * se
    assert abs(samples.var() / var.data.item() - 1) < 0.10


def test_sample_is_differentiable():
    rng = np.random.default_rng(7)
    layer = make_layer(rng)
    F = rng.normal(size=(3, 2))
    ad.tsum(layer.sample(F, rng.standard_normal((3, 2)))).backward()
    for name, p in layer.parameters().items():
        assert p.grad is not None and np.all(np.isfinite(p.grad)), name


def test_kl_of_prior_is_zero():
    layer = make_layer(np.random.default_rng(8), random_q=False)
    assert layer.kl().item() == 0.0


def test_kl_single_point():
    layer = SVGPLayer(np.zeros((1, 1)), 1)
    layer.q_mu.data = np.ones((1, 1))
    assert layer.kl().item() == pytest.approx(0.5, abs=1e-15)


def test_kl_matches_dense_formula():
    rng = np.random.default_rng(9)
    for _ in range(10):
        layer = make_layer(rng, M=5, d_in=2, d_out=2)
        assert abs(layer.kl().item() - dense_kl(layer)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(1e-3, 0.5))
def test_kl_positive_away_from_prior(seed, scale):
    rng = np.random.default_rng(seed)
    layer = make_layer(rng, M=4, random_q=False)
    which = rng.integers(3)
    if which == 0:
        layer.q_mu.data = layer.q_mu.data + scale * rng.normal(size=layer.q_mu.shape)
    elif which == 1:
        layer.q_sqrt_logdiag.data = layer.q_sqrt_logdiag.data + scale
    else:
        layer.q_sqrt_lower.data = np.tril(scale * np.ones(layer.q_sqrt_lower.shape), -1)
    assert layer.kl().item() > 0


def test_permuting_inducing_points_leaves_moments_unchanged():
    rng = np.random.default_rng(10)
    layer = make_layer(rng, M=6, d_in=2, d_out=2)
    F = rng.normal(size=(5, 2))
    mu, var = layer.predict_moments(F)

    # whitened factors are tied to the Cholesky ordering, so permute in u-space
    Kzz = layer.kernel.matrix(layer.Z).data
    Kzz = Kzz + layer.jitter * np.mean(np.diag(Kzz)) * np.eye(6)
    Lz = np.linalg.cholesky(Kzz)
    perm = rng.permutation(6)
    P = np.eye(6)[perm]
    Lp = np.linalg.cholesky(P @ Kzz @ P.T)
    T = np.linalg.solve(Lp, P @ Lz)
    S = layer.q_sqrt().data
    new_factors = np.stack([np.linalg.cholesky(T @ S[j] @ S[j].T @ T.T) for j in range(2)])
    permuted = SVGPLayer(layer.Z.data[perm], 2, kernel=layer.kernel)
    permuted.q_mu.data = T @ layer.q_mu.data
    permuted.set_q_sqrt(new_factors)
    mu_p, var_p = permuted.predict_moments(F)
    np.testing.assert_allclose(mu_p.data, mu.data, rtol=1e-9, atol=1e-10)
    np.testing.assert_allclose(var_p.data, var.data, rtol=1e-8, atol=1e-10)


def test_variance_nonnegative_before_clamp_in_random_draws():
    rng = np.random.default_rng(11)
    total = negative = 0
    for _ in range(200):
        layer = make_layer(rng, M=int(rng.integers(2, 8)), d_in=2, d_out=1)
        layer.kernel.log_lengthscales.data = rng.uniform(-1, 1, 2)
        F = rng.normal(size=(25, 2))
        layer.clamp_count = 0
        layer.predict_moments(F)
        negative += layer.clamp_count
        total += 25
    assert negative / total <= 1e-3
