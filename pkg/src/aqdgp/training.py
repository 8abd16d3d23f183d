"""Adam optimisation of the ELBO, station-fold cross-validation and grid search."""

import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import data as dataio
from .baselines import IDWModel, KNNModel, fit_exact_gp_hyperparameters, planar_coordinates
from .errors import AQDGPError, ParameterError, TrainingDivergenceError
from .metrics import MetricReport
from .model import DGPModel

logger = logging.getLogger(__name__)

DIVERGENCE_GRAD_NORM = 1e8
FULL_BATCH_LIMIT = 2048
DEFAULT_BATCH = 1024


# -- optimiser ---------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_dict(self):
        return {"step": self.step,
                "m": {k: v.tolist() for k, v in self.m.items()},
                "v": {k: v.tolist() for k, v in self.v.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["step"]),
                   {k: np.array(v, dtype=np.float64) for k, v in d["m"].items()},
                   {k: np.array(v, dtype=np.float64) for k, v in d["v"].items()})


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update applied in place to ``params[name].data``.

    ``grads`` maps the same names to gradient arrays (``None`` counts as zero).
    Non-finite gradients raise before any parameter is touched.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for {name}", parameter=name)
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ParameterError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


# -- configuration -----------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 0.05
    batch_size: int = None
    num_samples: int = 7
    num_inducing: int = 100
    depth: int = 2
    hidden_width: int = None
    seed: int = 0
    noise_variance: float = 0.1
    train_inducing: bool = True
    ard: bool = True
    freeze: tuple = ()
    predict_samples: int = 50

    def __post_init__(self):
        for name in ("learning_rate", "num_samples", "num_inducing", "depth", "noise_variance",
                     "predict_samples"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if self.epochs < 0:
            raise ParameterError("epochs must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ParameterError("batch_size must be positive")
        self.freeze = tuple(self.freeze)

    def resolved_batch_size(self, n):
        if self.batch_size is not None:
            return min(self.batch_size, n)
        return n if n <= FULL_BATCH_LIMIT else DEFAULT_BATCH

    def build_model(self, X):
        return DGPModel.from_data(X, num_inducing=self.num_inducing, depth=self.depth,
                                  hidden_width=self.hidden_width, num_samples=self.num_samples,
                                  noise_variance=self.noise_variance, seed=self.seed,
                                  train_inducing=self.train_inducing, ard=self.ard)

    def to_dict(self):
        d = asdict(self)
        d["freeze"] = list(self.freeze)
        return d


@dataclass
class TrainHistory:
    elbo: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    diverged: bool = False
    divergence_reason: str = None

    def __len__(self):
        return len(self.elbo)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# -- training ----------------------------------------------------------------

class Trainer:
    """Minibatch Adam on the negative ELBO with resumable state.

    The shuffle order and Monte Carlo draws come from one generator seeded by
    ``config.seed``, so a run is reproducible bit for bit.
    """

    def __init__(self, model, X, y, config):
        self.model = model
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64).reshape(-1)
        if len(self.y) == 0:
            raise ParameterError("training split is empty")
        self.config = config
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        self.optimizer = AdamState()
        self.history = TrainHistory()
        self.epoch = 0

    def trainable(self):
        return {name: t for name, t in self.model.parameters().items()
                if t.requires_grad and not any(f in name for f in self.config.freeze)}

    def step(self, rows):
        params = self.trainable()
        for t in self.model.parameters().values():
            t.zero_grad()
        elbo = self.model.elbo(self.X[rows], self.y[rows], num_total=len(self.y), rng=self.rng)
        (-elbo).backward()
        grads = {n: t.grad for n, t in params.items()}
        norm = float(np.sqrt(sum(np.sum(g**2) for g in grads.values() if g is not None)))
        if not np.isfinite(norm) or norm > DIVERGENCE_GRAD_NORM:
            raise TrainingDivergenceError(f"gradient norm {norm:.3g}",
                                          snapshot=self.model.snapshot())
        adam_step(params, grads, self.optimizer, self.config.learning_rate)
        return float(elbo.data), norm

    def run(self, epochs=None):
        epochs = self.config.epochs if epochs is None else epochs
        n = len(self.y)
        batch = self.config.resolved_batch_size(n)
        for _ in range(epochs):
            if self.history.diverged:
                break
            started = time.perf_counter()
            order = self.rng.permutation(n)
            elbos, norms = [], []
            try:
                for start in range(0, n, batch):
                    e, g = self.step(order[start:start + batch])
                    elbos.append(e)
                    norms.append(g)
            except TrainingDivergenceError as exc:
                logger.warning("training diverged at epoch %d: %s", self.epoch, exc)
                self.history.diverged = True
                self.history.divergence_reason = str(exc)
                break
            self.epoch += 1
            self.history.elbo.append(float(np.mean(elbos)))
            self.history.grad_norm.append(float(np.mean(norms)))
            self.history.wall_clock.append(time.perf_counter() - started)
        return self.history

    def state_dict(self):
        """Resumable state. Wall-clock timings are left out so that checkpoints
        of identical runs are byte-identical."""
        history = self.history.to_dict()
        del history["wall_clock"]
        return {"epoch": self.epoch, "adam": self.optimizer.to_dict(),
                "rng": self.rng.bit_generator.state, "history": history}

    def load_state_dict(self, state):
        self.epoch = int(state["epoch"])
        self.optimizer = AdamState.from_dict(state["adam"])
        self.rng.bit_generator.state = state["rng"]
        history = dict(state["history"])
        history.setdefault("wall_clock", [float("nan")] * len(history["elbo"]))
        self.history = TrainHistory.from_dict(history)


def train(model, X, y, config):
    return Trainer(model, X, y, config).run()


def elbo_estimate(model, X, y, num_draws=10, seed=0):
    """Average of ``num_draws`` independent ELBO evaluations."""
    from .autodiff import no_grad

    rng = np.random.default_rng(seed)
    with no_grad():
        return float(np.mean([model.elbo(X, y, rng=rng).data for _ in range(num_draws)]))


# -- cross-validation -------------------------------------------------------

@dataclass
class BaselineConfig:
    idw_power: float = 2.0
    knn_k: int = 5
    exact_gp_max_rows: int = 1000
    exact_gp_steps: int = 200
    exact_gp_learning_rate: float = 0.05


@dataclass
class FoldResult:
    fold: int
    test_stations: list
    metrics: dict
    coverage: float = None
    history: TrainHistory = None
    diverged: bool = False
    seconds: float = 0.0


@dataclass
class CVReport:
    """Per-fold and mean RMSE/MAE/R^2 for every evaluated model."""

    folds: list
    config: dict
    features: list

    @property
    def models(self):
        return list(self.folds[0].metrics) if self.folds else []

    @property
    def diverged(self):
        return any(f.diverged for f in self.folds)

    def mean(self, model="DSVI"):
        rows = [f.metrics[model] for f in self.folds]
        return MetricReport(float(np.mean([r.rmse for r in rows])),
                            float(np.mean([r.mae for r in rows])),
                            float(np.mean([r.r2 for r in rows])))

    def mean_coverage(self):
        cov = [f.coverage for f in self.folds if f.coverage is not None]
        return float(np.mean(cov)) if cov else None

    def to_dict(self):
        return {
            "config": self.config,
            "features": self.features,
            "folds": [{"fold": f.fold, "test_stations": f.test_stations, "diverged": f.diverged,
                       "coverage": f.coverage,
                       "metrics": {m: r.as_dict() for m, r in f.metrics.items()}}
                      for f in self.folds],
            "mean": {m: self.mean(m).as_dict() for m in self.models},
        }


def prepare_split(train_ds, test_ds, names):
    Xtr = dataio.design_matrix(train_ds, names)
    ytr = train_ds.targets
    stats = dataio.fit_normalizer(Xtr, ytr, names)
    Xtr_n = stats.apply(dataio.select_columns(Xtr, names, stats.names))
    Xte = dataio.design_matrix(test_ds, names)
    Xte_n = stats.apply(dataio.select_columns(Xte, names, stats.names))
    return Xtr_n, stats.apply_target(ytr), Xte_n, stats


def predict_denormalized(model, X, stats, num_samples, seed):
    pred = model.predict(X, num_samples=num_samples, rng=np.random.default_rng(seed))
    return stats.invert_target(pred.mean), stats.invert_variance(pred.variance)


def _spatial_baselines(train_ds, test_ds, cfg):
    """IDW and KNN interpolate across the training stations reporting at the same timestamp."""
    ref_lat = float(np.mean([c[0] for c in train_ds.stations.values()]))
    tr, te = train_ds.frame, test_ds.frame
    idw_out = np.full(len(te), np.nan)
    knn_out = np.full(len(te), np.nan)
    groups = tr.groupby("timestamp").indices
    fallback = float(tr["pm25"].mean())
    for ts, rows in te.groupby("timestamp").indices.items():
        q = planar_coordinates(te["latitude"].to_numpy()[rows], te["longitude"].to_numpy()[rows],
                               ref_lat)
        train_rows = groups.get(ts)
        if train_rows is None:
            idw_out[rows] = knn_out[rows] = fallback
            continue
        pts = planar_coordinates(tr["latitude"].to_numpy()[train_rows],
                                 tr["longitude"].to_numpy()[train_rows], ref_lat)
        vals = tr["pm25"].to_numpy()[train_rows]
        idw_out[rows] = IDWModel(pts, vals, power=cfg.idw_power).predict(q)
        knn_out[rows] = KNNModel(pts, vals, k=min(cfg.knn_k, len(vals))).predict(q)
    return idw_out, knn_out


def _exact_gp_baseline(Xtr, ytr, Xte, stats, cfg, seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    if len(ytr) > cfg.exact_gp_max_rows:
        rows = np.sort(rng.choice(len(ytr), cfg.exact_gp_max_rows, replace=False))
        Xtr, ytr = Xtr[rows], ytr[rows]
    gp = fit_exact_gp_hyperparameters(Xtr, ytr, steps=cfg.exact_gp_steps,
                                      learning_rate=cfg.exact_gp_learning_rate)
    mean, _ = gp.predict(Xte)
    return stats.invert_target(mean)


def run_fold(dataset, plan, fold, config, names, baselines=None, band_z=1.96):
    started = time.perf_counter()
    train_ds, test_ds = plan.split(dataset, fold)
    Xtr, ytr, Xte, stats = prepare_split(train_ds, test_ds, names)
    fold_config = replace(config, seed=int(np.random.SeedSequence([config.seed, fold])
                                           .generate_state(1)[0]))
    model = fold_config.build_model(Xtr)
    trainer = Trainer(model, Xtr, ytr, fold_config)
    history = trainer.run()
    mean, var = predict_denormalized(model, Xte, stats, config.predict_samples,
                                     seed=fold_config.seed)
    y_true = test_ds.targets
    half = band_z * np.sqrt(var)
    coverage = float(np.mean(np.abs(y_true - mean) <= half))
    metrics = {"DSVI": MetricReport.compute(y_true, mean)}
    if baselines is not None:
        idw, knn = _spatial_baselines(train_ds, test_ds, baselines)
        metrics["IDW"] = MetricReport.compute(y_true, idw)
        metrics["KNN"] = MetricReport.compute(y_true, knn)
        gp_mean = _exact_gp_baseline(Xtr, ytr, Xte, stats, baselines, fold_config.seed)
        metrics["Exact GP"] = MetricReport.compute(y_true, gp_mean)
    return FoldResult(fold, plan.stations_in(fold), metrics, coverage, history,
                      history.diverged, time.perf_counter() - started)


def cross_validate(dataset, config, k=3, features=None, baselines=None, fold_seed=None,
                   band_z=1.96):
    features = dataio.DEFAULT_FEATURES if features is None else features
    names = dataio.resolve_features(dataset, features)
    plan = dataio.make_station_folds(dataset, k, config.seed if fold_seed is None else fold_seed)
    folds = [run_fold(dataset, plan, f, config, names, baselines, band_z) for f in range(k)]
    return CVReport(folds, config.to_dict(), names)


def baseline_grid(dataset, powers=(1.0, 2.0, 3.0), ks=(3, 5, 7), k=3, seed=0):
    """Station-fold CV of IDW over ``powers`` and KNN over ``ks``, ranked by mean RMSE."""
    plan = dataio.make_station_folds(dataset, k, seed)
    splits = [plan.split(dataset, f) for f in range(k)]
    rows = []
    settings = [("IDW", "power", p) for p in powers] + [("KNN", "k", n) for n in ks]
    for model, parameter, value in settings:
        cfg = BaselineConfig(idw_power=value if model == "IDW" else 2.0,
                             knn_k=value if model == "KNN" else 1)
        reports = []
        for train_ds, test_ds in splits:
            idw, knn = _spatial_baselines(train_ds, test_ds, cfg)
            reports.append(MetricReport.compute(test_ds.targets, idw if model == "IDW" else knn))
        rows.append({"model": model, "parameter": parameter, "value": value,
                     "rmse": float(np.mean([r.rmse for r in reports])),
                     "mae": float(np.mean([r.mae for r in reports])),
                     "r2": float(np.mean([r.r2 for r in reports]))})
    return sorted(rows, key=lambda r: (r["model"], r["rmse"], r["mae"]))


# -- grid search ---------------------------------------------------------------

@dataclass
class GridSpec:
    inducing: tuple = (25, 40, 60, 100)
    samples: tuple = (3, 5, 7)
    learning_rate: tuple = (0.01, 0.05, 0.1)

    def __post_init__(self):
        for axis in (self.inducing, self.samples, self.learning_rate):
            if len(axis) == 0:
                raise ParameterError("grid axes must be non-empty")

    def combinations(self):
        return list(itertools.product(self.inducing, self.samples, self.learning_rate))


@dataclass
class GridResult:
    index: int
    num_inducing: int
    num_samples: int
    learning_rate: float
    report: CVReport = None
    failed: bool = False
    error: str = None

    @property
    def mean_rmse(self):
        return self.report.mean().rmse if self.report and not self.failed else float("nan")

    @property
    def mean_mae(self):
        return self.report.mean().mae if self.report and not self.failed else float("nan")


def _evaluate_combination(args):
    index, (m, s, lr), dataset, base, k, features = args
    config = replace(base, num_inducing=m, num_samples=s, learning_rate=lr)
    result = GridResult(index, m, s, lr)
    try:
        result.report = cross_validate(dataset, config, k=k, features=features)
        result.failed = result.report.diverged
        if result.failed:
            result.error = "fold diverged"
    except AQDGPError as exc:
        result.failed, result.error = True, f"{exc.code}: {exc}"
    return result


def grid_search(dataset, grid=None, base_config=None, k=3, features=None, workers=1,
                order=None):
    """Cross-validate every grid combination and rank by mean RMSE.

    Every combination is trained from the same seed, so each result depends
    only on its own parameters and the evaluation order (``order``, a
    permutation of combination indices) cannot change the ranking. Failed
    combinations are appended after the ranked ones.
    """
    grid = grid or GridSpec()
    base_config = base_config or TrainConfig()
    combos = grid.combinations()
    order = range(len(combos)) if order is None else order
    jobs = [(i, combos[i], dataset, base_config, k, features) for i in order]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_evaluate_combination, jobs))
    else:
        results = [_evaluate_combination(job) for job in jobs]
    results.sort(key=lambda r: r.index)
    ok = sorted((r for r in results if not r.failed),
                key=lambda r: (r.mean_rmse, r.mean_mae, r.index))
    return ok + [r for r in results if r.failed]
