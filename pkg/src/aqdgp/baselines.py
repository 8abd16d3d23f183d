"""Non-deep comparators: inverse distance weighting, k-nearest neighbours and exact GP regression."""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import autodiff as ad
from .errors import DecompositionError, ModelError, ParameterError
from .kernels import RBFKernel

EARTH_RADIUS_KM = 6371.0


def planar_coordinates(lat, lon, ref_lat=None):
    """Local equirectangular projection of degrees to kilometres."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    ref = np.mean(lat) if ref_lat is None else ref_lat
    scale = np.pi / 180 * EARTH_RADIUS_KM
    return np.column_stack([lat * scale, lon * scale * np.cos(np.radians(ref))])


def _check_training(points, targets):
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(targets) == 0:
        raise ModelError("empty training set")
    if len(points) != len(targets):
        raise ModelError("points and targets differ in length")
    return points, targets


@dataclass
class IDWModel:
    points: np.ndarray
    targets: np.ndarray
    power: float = 2.0
    match_epsilon: float = 1e-9

    def __post_init__(self):
        self.points, self.targets = _check_training(self.points, self.targets)
        if self.power <= 0:
            raise ParameterError("IDW power must be positive")

    def predict(self, query):
        query = np.asarray(query, dtype=np.float64)
        single = query.ndim == 1
        query = np.atleast_2d(query)
        d = np.sqrt(((query[:, None, :] - self.points[None, :, :]) ** 2).sum(-1))
        out = np.empty(len(query))
        for i, row in enumerate(d):
            nearest = int(np.argmin(row))
            if row[nearest] < self.match_epsilon:
                out[i] = self.targets[nearest]
                continue
            # log-domain weights so large powers do not underflow
            logw = -self.power * np.log(row)
            w = np.exp(logw - logw.max())
            out[i] = w @ self.targets / w.sum()
        return out[0] if single else out


def idw_predict(model, query):
    return model.predict(query)


@dataclass
class KNNModel:
    points: np.ndarray
    targets: np.ndarray
    k: int = 5

    def __post_init__(self):
        self.points, self.targets = _check_training(self.points, self.targets)
        if self.k < 1 or self.k > len(self.targets):
            raise ParameterError(f"k={self.k} must lie in [1, {len(self.targets)}]")

    def predict(self, query):
        query = np.asarray(query, dtype=np.float64)
        single = query.ndim == 1
        query = np.atleast_2d(query)
        d = ((query[:, None, :] - self.points[None, :, :]) ** 2).sum(-1)
        # stable sort keeps the lower row index first among equal distances
        nearest = np.argsort(d, axis=1, kind="stable")[:, : self.k]
        out = self.targets[nearest].mean(axis=1)
        return out[0] if single else out


def knn_predict(model, query):
    return model.predict(query)


@dataclass
class ExactGP:
    kernel: RBFKernel
    X: np.ndarray
    y: np.ndarray
    noise: float
    chol: np.ndarray = field(repr=False, default=None)
    alpha: np.ndarray = field(repr=False, default=None)

    def predict(self, Xs):
        Xs = np.atleast_2d(np.asarray(Xs, dtype=np.float64))
        with ad.no_grad():
            Ksx = self.kernel.matrix(Xs, self.X).data
            kss = self.kernel.diag(Xs).data
        mean = Ksx @ self.alpha
        v = solve_triangular(self.chol, Ksx.T, lower=True)
        var = np.maximum(kss - np.sum(v**2, axis=0), 0.0)
        return mean, var

    def lml(self):
        n = len(self.y)
        return float(-0.5 * self.y @ self.alpha - np.sum(np.log(np.diag(self.chol)))
                     - 0.5 * n * np.log(2 * np.pi))


def exact_gp_fit(kernel, X, y, noise):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if noise < 0:
        raise ParameterError("noise variance must be non-negative")
    with ad.no_grad():
        K = kernel.matrix(X).data
    try:
        chol = ad.cholesky(K + noise * np.eye(len(y)), jitter=0.0).data
    except DecompositionError as exc:
        raise ModelError(f"exact GP covariance is not positive definite: {exc}") from exc
    alpha = cho_solve((chol, True), y)
    return ExactGP(kernel, X, y, float(noise), chol, alpha)


def exact_gp_predict(gp, Xs):
    return gp.predict(Xs)


def exact_gp_lml(gp):
    return gp.lml()


def exact_gp_lml_tensor(kernel, X, y, log_noise):
    """Differentiable log marginal likelihood, used to fit hyperparameters."""
    n = len(y)
    K = kernel.matrix(X) + ad.exp(log_noise) * np.eye(n)
    L = ad.cholesky(K)
    a = ad.trisolve(L, np.asarray(y, dtype=np.float64).reshape(-1, 1))
    return (-0.5 * ad.tsum(ad.square(a)) - ad.tsum(ad.log(ad.diagonal(L)))
            - 0.5 * n * np.log(2 * np.pi))


def fit_exact_gp_hyperparameters(X, y, steps=200, learning_rate=0.05, noise=0.1, ard=True,
                                 min_noise=1e-6):
    """Type-II maximum likelihood with Adam; returns a fitted :class:`ExactGP`."""
    from .training import AdamState, adam_step

    X = np.asarray(X, dtype=np.float64)
    kernel = RBFKernel(X.shape[1], ard=ard)
    log_noise = ad.Tensor(np.log(noise), requires_grad=True, name="log_noise")
    params = dict(kernel.parameters(), log_noise=log_noise)
    state = AdamState()
    for _ in range(steps):
        for t in params.values():
            t.zero_grad()
        loss = -exact_gp_lml_tensor(kernel, X, y, log_noise)
        loss.backward()
        adam_step(params, {k: t.grad for k, t in params.items()}, state, learning_rate)
        log_noise.data = np.maximum(log_noise.data, np.log(min_noise))
    return exact_gp_fit(kernel, X, y, float(np.exp(log_noise.data)))
