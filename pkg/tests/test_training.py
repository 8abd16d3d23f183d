import numpy as np
import pytest

from aqdgp import autodiff as ad
from aqdgp import data as dio
from aqdgp.errors import ParameterError, TrainingDivergenceError
from aqdgp.model import DGPModel
from aqdgp.training import (AdamState, BaselineConfig, GridSpec, TrainConfig, Trainer,
                            adam_step, cross_validate, elbo_estimate, grid_search, train)


def param(value):
    return ad.Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def toy(n=40, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, (n, 2))
    return X, np.sin(X[:, 0]) * np.cos(X[:, 1]) + 0.05 * rng.normal(size=n)


def small_config(**kw):
    base = dict(epochs=5, num_inducing=6, num_samples=2, predict_samples=5)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_gradient_leaves_parameters():
    p = {"x": param([1.0, -2.0])}
    state = adam_step(p, {"x": np.zeros(2)}, AdamState(), 0.1)
    np.testing.assert_array_equal(p["x"].data, [1.0, -2.0])
    assert state.step == 1


def test_first_step_moves_by_learning_rate():
    p = {"x": param([1.0, 1.0])}
    adam_step(p, {"x": np.array([3.0, -1e-3])}, AdamState(), 0.05)
    np.testing.assert_allclose(p["x"].data, [0.95, 1.05], rtol=1e-5)


def test_minimises_square():
    x = param(5.0)
    state = AdamState()
    for _ in range(2000):
        adam_step({"x": x}, {"x": 2 * x.data}, state, 0.05)
    assert abs(x.item()) < 1e-3


def test_non_finite_gradient_names_parameter():
    p = {"a": param(1.0), "b": param(2.0)}
    with pytest.raises(TrainingDivergenceError) as info:
        adam_step(p, {"a": np.array(0.5), "b": np.array(np.nan)}, AdamState(), 0.1)
    assert info.value.parameter == "b"
    assert p["a"].item() == 1.0


def test_adam_state_serialises_exactly():
    p = {"x": param([0.3, 0.7])}
    state = AdamState()
    adam_step(p, {"x": np.array([0.1, 1 / 3])}, state, 0.1)
    back = AdamState.from_dict(state.to_dict())
    assert back.step == 1
    assert back.v["x"].tobytes() == state.v["x"].tobytes()


def test_config_defaults_follow_reported_setup():
    c = TrainConfig()
    assert (c.epochs, c.learning_rate, c.num_inducing, c.num_samples) == (500, 0.05, 100, 7)
    assert c.resolved_batch_size(2048) == 2048 and c.resolved_batch_size(2049) == 1024


@pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"epochs": -1}, {"num_samples": 0},
                                {"batch_size": 0}])
def test_config_validation(kw):
    with pytest.raises(ParameterError):
        TrainConfig(**kw)


def test_zero_epochs_keeps_initialisation():
    X, y = toy()
    cfg = small_config(epochs=0)
    model = cfg.build_model(X)
    before = model.snapshot()
    history = train(model, X, y, cfg)
    assert len(history) == 0
    for k, v in model.snapshot().items():
        np.testing.assert_array_equal(v, before[k])


def test_history_length_matches_epochs():
    X, y = toy()
    cfg = small_config(epochs=4, batch_size=16)
    h = train(cfg.build_model(X), X, y, cfg)
    assert len(h) == len(h.grad_norm) == len(h.wall_clock) == 4 and not h.diverged


def test_training_is_bit_reproducible():
    X, y = toy()
    cfg = small_config(batch_size=16)
    runs = []
    for _ in range(2):
        model = cfg.build_model(X)
        train(model, X, y, cfg)
        runs.append(model.snapshot())
    for k in runs[0]:
        assert runs[0][k].tobytes() == runs[1][k].tobytes(), k


def test_resume_matches_uninterrupted_run():
    X, y = toy()
    cfg = small_config(epochs=10, batch_size=16)
    full = cfg.build_model(X)
    reference = Trainer(full, X, y, cfg)
    reference.run(10)

    first = cfg.build_model(X)
    t1 = Trainer(first, X, y, cfg)
    t1.run(5)
    values, state = first.snapshot(), t1.state_dict()
    import json
    state = json.loads(json.dumps(state))

    resumed = DGPModel.from_config(first.config(), values)
    t2 = Trainer(resumed, X, y, cfg)
    t2.load_state_dict(state)
    t2.run(5)
    for k, v in full.snapshot().items():
        assert np.array_equal(resumed.snapshot()[k], v), k
    assert t2.history.elbo == reference.history.elbo


def test_frozen_parameters_do_not_move():
    X, y = toy()
    cfg = small_config(freeze=("kernel", "log_noise"))
    model = cfg.build_model(X)
    before = model.snapshot()
    train(model, X, y, cfg)
    after = model.snapshot()
    for k in before:
        moved = not np.array_equal(before[k], after[k])
        assert moved != ("kernel" in k or k == "log_noise"), k


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_recorded_not_raised():
    X, y = toy()
    cfg = small_config(learning_rate=1e6, epochs=20)
    y_bad = y * 1e200
    h = train(cfg.build_model(X), X, y_bad, cfg)
    assert h.diverged and h.divergence_reason
    assert len(h) < 20


def test_elbo_improves_on_synthetic_data():
    ds = dio.generate_synthetic(0, 8, 20, lengthscales=(0.5, 0.5, 6.0), noise=0.01)
    X = dio.design_matrix(ds, list(dio.SYNTHETIC_FEATURES))
    stats = dio.fit_normalizer(X, ds.targets, list(dio.SYNTHETIC_FEATURES))
    Xn, yn = stats.apply(X), stats.apply_target(ds.targets)
    cfg = TrainConfig(epochs=60, num_inducing=20, num_samples=3)
    model = cfg.build_model(Xn)
    start = elbo_estimate(model, Xn, yn, num_draws=10, seed=1)
    train(model, Xn, yn, cfg)
    assert elbo_estimate(model, Xn, yn, num_draws=10, seed=1) > start


def test_elbo_noise_shrinks_with_more_samples():
    X, y = toy()
    model = DGPModel.from_data(X, num_inducing=6, depth=2, seed=0)
    rng = np.random.default_rng(5)
    for t in model.parameters().values():
        t.data = t.data + 0.2 * rng.normal(size=t.shape)
    with ad.no_grad():
        sd = {s: np.std([model.elbo(X, y, eps=model.draw_eps(40, s, rng)).item()
                         for _ in range(100)]) for s in (3, 12)}
    assert sd[12] < sd[3]


def test_grid_has_thirty_six_unique_combinations():
    combos = GridSpec().combinations()
    assert len(combos) == 36 == len(set(combos))
    assert {c[0] for c in combos} == {25, 40, 60, 100}
    assert {c[1] for c in combos} == {3, 5, 7}
    assert {c[2] for c in combos} == {0.01, 0.05, 0.1}


def test_grid_axis_must_be_non_empty():
    with pytest.raises(ParameterError):
        GridSpec(inducing=())


@pytest.fixture(scope="module")
def tiny_stations():
    return dio.generate_synthetic(2, 6, 8, lengthscales=(0.5, 0.5, 4.0), noise=0.02)


def test_cross_validation_folds_and_baselines(tiny_stations):
    cfg = small_config()
    report = cross_validate(tiny_stations, cfg, k=3, features=dio.SYNTHETIC_FEATURES,
                            baselines=BaselineConfig(exact_gp_steps=10))
    assert len(report.folds) == 3
    assert report.models == ["DSVI", "IDW", "KNN", "Exact GP"]
    tested = [s for f in report.folds for s in f.test_stations]
    assert sorted(tested) == tiny_stations.station_ids
    assert report.mean("IDW").rmse >= report.mean("IDW").mae
    assert 0 <= report.mean_coverage() <= 1


def test_cross_validation_rerun_identical(tiny_stations):
    cfg = small_config()
    a = cross_validate(tiny_stations, cfg, k=3, features=dio.SYNTHETIC_FEATURES)
    b = cross_validate(tiny_stations, cfg, k=3, features=dio.SYNTHETIC_FEATURES)
    assert a.to_dict() == b.to_dict()


def test_single_point_grid_equals_cross_validation(tiny_stations):
    cfg = small_config()
    grid = GridSpec(inducing=(6,), samples=(2,), learning_rate=(0.05,))
    [result] = grid_search(tiny_stations, grid, cfg, k=3, features=dio.SYNTHETIC_FEATURES)
    direct = cross_validate(tiny_stations, cfg, k=3, features=dio.SYNTHETIC_FEATURES)
    assert result.report.to_dict()["mean"] == direct.to_dict()["mean"]


def test_grid_ranking_invariant_to_evaluation_order(tiny_stations):
    cfg = small_config(epochs=3)
    grid = GridSpec(inducing=(4, 8), samples=(2,), learning_rate=(0.01, 0.1))
    kw = dict(k=3, features=dio.SYNTHETIC_FEATURES)
    forward = grid_search(tiny_stations, grid, cfg, **kw)
    backward = grid_search(tiny_stations, grid, cfg, order=[3, 1, 2, 0], **kw)
    assert [r.index for r in forward] == [r.index for r in backward]
    assert [r.mean_rmse for r in forward] == [r.mean_rmse for r in backward]
    rmses = [r.mean_rmse for r in forward]
    assert rmses == sorted(rmses)


def test_grid_parallel_matches_serial(tiny_stations):
    cfg = small_config(epochs=2)
    grid = GridSpec(inducing=(4,), samples=(2,), learning_rate=(0.01, 0.1))
    kw = dict(k=3, features=dio.SYNTHETIC_FEATURES)
    serial = grid_search(tiny_stations, grid, cfg, **kw)
    parallel = grid_search(tiny_stations, grid, cfg, workers=2, **kw)
    assert [r.mean_rmse for r in serial] == [r.mean_rmse for r in parallel]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_failed_combination_reported_after_ranked(tiny_stations):
    cfg = small_config(epochs=3)
    grid = GridSpec(inducing=(4,), samples=(2,), learning_rate=(0.05, 1e9))
    results = grid_search(tiny_stations, grid, cfg, k=3, features=dio.SYNTHETIC_FEATURES)
    assert [(r.learning_rate, r.failed) for r in results] == [(0.05, False), (1e9, True)]
    assert results[1].error
