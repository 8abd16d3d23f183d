import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aqdgp.baselines import (IDWModel, KNNModel, exact_gp_fit, exact_gp_lml, exact_gp_predict,
                             fit_exact_gp_hyperparameters, idw_predict, knn_predict,
                             planar_coordinates)
from aqdgp import autodiff as ad
from aqdgp.errors import ModelError, ParameterError
from aqdgp.kernels import RBFKernel


def brute_force_knn(points, targets, query, k):
    d = [(float(np.sum((p - query) ** 2)), i) for i, p in enumerate(points)]
    d.sort()
    return float(np.mean([targets[i] for _, i in d[:k]]))


def test_idw_query_at_station_returns_its_value():
    m = IDWModel(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]]), [5.0, 7.0, 9.0])
    assert idw_predict(m, [1.0, 0.0]) == 7.0


def test_idw_equidistant_pair_averages():
    m = IDWModel(np.array([[-1.0, 0.0], [1.0, 0.0]]), [10.0, 30.0])
    assert idw_predict(m, [0.0, 0.5]) == pytest.approx(20.0, abs=1e-12)


def test_idw_large_power_tends_to_nearest():
    rng = np.random.default_rng(0)
    pts, y = rng.uniform(size=(8, 2)), rng.uniform(0, 100, 8)
    m = IDWModel(pts, y, power=50)
    for q in rng.uniform(size=(20, 2)):
        d = np.sort(np.linalg.norm(pts - q, axis=1))
        if d[1] / d[0] < 1.5:
            continue
        assert idw_predict(m, q) == pytest.approx(y[np.argmin(np.linalg.norm(pts - q, axis=1))],
                                                  abs=1e-6)


def test_idw_empty_training_set():
    with pytest.raises(ModelError):
        IDWModel(np.zeros((0, 2)), [])


def test_knn_full_k_is_global_mean():
    rng = np.random.default_rng(1)
    pts, y = rng.normal(size=(6, 2)), rng.normal(size=6)
    assert knn_predict(KNNModel(pts, y, k=6), [3.0, 3.0]) == pytest.approx(y.mean(), rel=1e-14)


def test_knn_one_neighbour_at_station():
    pts = np.array([[0.0, 0.0], [2.0, 2.0]])
    assert knn_predict(KNNModel(pts, [4.0, 8.0], k=1), [2.0, 2.0]) == 8.0


def test_knn_tie_broken_by_row_index():
    pts = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 5.0]])
    assert knn_predict(KNNModel(pts, [1.0, 2.0, 3.0], k=1), [0.0, 0.0]) == 1.0


def test_knn_k_too_large():
    with pytest.raises(ParameterError):
        KNNModel(np.zeros((2, 2)) + [[0, 0], [1, 1]], [1.0, 2.0], k=3)


def test_knn_matches_brute_force_on_100_queries():
    rng = np.random.default_rng(2)
    pts, y = rng.uniform(size=(30, 2)), rng.normal(size=30)
    model = KNNModel(pts, y, k=5)
    queries = rng.uniform(size=(100, 2))
    got = model.predict(queries)
    for q, g in zip(queries, got):
        assert g == brute_force_knn(pts, y, q, 5)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), shift=st.tuples(st.floats(-50, 50), st.floats(-50, 50)))
def test_idw_knn_translation_invariant_and_bounded(seed, shift):
    rng = np.random.default_rng(seed)
    pts, y = rng.uniform(size=(7, 2)), rng.uniform(0, 50, 7)
    q = rng.uniform(size=(5, 2))
    s = np.array(shift)
    idw, idw_s = IDWModel(pts, y), IDWModel(pts + s, y)
    knn, knn_s = KNNModel(pts, y, k=3), KNNModel(pts + s, y, k=3)
    np.testing.assert_allclose(idw.predict(q), idw_s.predict(q + s), rtol=1e-6)
    np.testing.assert_allclose(knn.predict(q), knn_s.predict(q + s), rtol=1e-12)
    p = idw.predict(q)
    assert np.all(p >= y.min() - 1e-9) and np.all(p <= y.max() + 1e-9)


def test_planar_coordinates_scale():
    xy = planar_coordinates([0.0, 1.0], [0.0, 0.0], ref_lat=0.0)
    assert xy[1, 0] - xy[0, 0] == pytest.approx(111.19, abs=0.01)


def test_exact_gp_interpolates_without_noise():
    rng = np.random.default_rng(3)
    X, y = rng.uniform(-2, 2, size=(8, 1)), rng.normal(size=8)
    gp = exact_gp_fit(RBFKernel(1, lengthscales=0.3), X, y, 1e-10)
    mean, var = exact_gp_predict(gp, X)
    np.testing.assert_allclose(mean, y, atol=1e-5)
    assert np.all(var < 1e-6)


def test_exact_gp_single_point():
    k = RBFKernel(2, variance=1.5, lengthscales=[0.5, 2.0])
    x, y, noise = np.array([[0.2, 0.3]]), np.array([1.7]), 0.2
    gp = exact_gp_fit(k, x, y, noise)
    xs = np.array([0.5, -0.1])
    mean, _ = exact_gp_predict(gp, xs[None])
    assert mean[0] == pytest.approx(k.eval(xs, x[0]) * 1.7 / (1.5 + noise), rel=1e-12)


def test_exact_gp_lml_matches_dense_formula():
    rng = np.random.default_rng(4)
    X, y = rng.normal(size=(6, 2)), rng.normal(size=6)
    k = RBFKernel(2, variance=0.8, lengthscales=[0.9, 1.3])
    gp = exact_gp_fit(k, X, y, 0.15)
    K = k.matrix(X).data + 0.15 * np.eye(6)
    dense = (-0.5 * y @ np.linalg.inv(K) @ y - 0.5 * np.log(np.linalg.det(K))
             - 3 * np.log(2 * np.pi))
    assert abs(exact_gp_lml(gp) - dense) < 1e-8


def test_exact_gp_variance_bounds():
    rng = np.random.default_rng(5)
    X, y = rng.normal(size=(10, 2)), rng.normal(size=10)
    k = RBFKernel(2, variance=2.0)
    gp = exact_gp_fit(k, X, y, 0.1)
    _, var = gp.predict(rng.normal(scale=3, size=(50, 2)))
    assert np.all(var >= 0) and np.all(var <= 2.0 + 1e-12)


def test_exact_gp_high_signal_to_noise_recovers_target():
    X, y = np.array([[0.0], [1.0], [3.0]]), np.array([1.0, -2.0, 0.5])
    gp = exact_gp_fit(RBFKernel(1, variance=100.0), X, y, 1e-4)
    mean, _ = gp.predict(X)
    np.testing.assert_allclose(mean, y, atol=1e-3)


def test_exact_gp_duplicate_inputs_rescued_by_jitter():
    X = np.zeros((3, 1))
    mean, _ = exact_gp_fit(RBFKernel(1), X, np.ones(3), 0.0).predict(X)
    np.testing.assert_allclose(mean, 1.0, atol=1e-2)


def test_exact_gp_negative_noise_rejected():
    with pytest.raises(ParameterError):
        exact_gp_fit(RBFKernel(1), np.zeros((1, 1)), np.ones(1), -0.1)


def test_exact_gp_indefinite_covariance_errors():
    class Broken(RBFKernel):
        def matrix(self, X, X2=None):
            return ad.Tensor(-np.eye(len(X)))

    with pytest.raises(ModelError):
        exact_gp_fit(Broken(1), np.zeros((2, 1)), np.ones(2), 0.0)


def test_hyperparameter_fit_improves_lml():
    rng = np.random.default_rng(6)
    X = rng.uniform(-3, 3, size=(40, 1))
    y = np.sin(2 * X[:, 0]) + 0.1 * rng.normal(size=40)
    start = exact_gp_fit(RBFKernel(1), X, y, 0.1).lml()
    fitted = fit_exact_gp_hyperparameters(X, y, steps=100)
    assert fitted.lml() > start
