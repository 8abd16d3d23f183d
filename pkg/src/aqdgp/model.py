"""Deep GP trained by doubly stochastic variational inference.

Samples are pushed through the hidden layers with the reparameterisation
trick; the final layer is handled analytically per sample, so the data term
of the bound only needs the final-layer marginal moments.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, TrainingDivergenceError
from .kernels import RBFKernel
from .layers import SVGPLayer
from .metrics import expected_gaussian_loglik


@dataclass
class PredictiveDistribution:
    mean: np.ndarray
    variance: np.ndarray
    sample_means: np.ndarray = None
    sample_variances: np.ndarray = None

    @property
    def std(self):
        return np.sqrt(self.variance)

    def band(self, z=1.96):
        half = z * self.std
        return self.mean - half, self.mean + half


class DGPModel:
    def __init__(self, layers, noise_variance=0.1, num_samples=7):
        if not layers:
            raise ValueError("a deep GP needs at least one layer")
        for lower, upper in zip(layers[:-1], layers[1:]):
            if lower.output_dim != upper.input_dim:
                raise DimensionError(
                    f"layer output width {lower.output_dim} != next input width {upper.input_dim}")
        if layers[-1].output_dim != 1:
            raise DimensionError("the final layer must have a single output")
        if num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        self.layers = list(layers)
        self.log_noise = ad.Tensor(np.log(noise_variance), requires_grad=True, name="log_noise")
        self.num_samples = int(num_samples)

    @classmethod
    def from_data(cls, X, num_inducing=100, depth=2, hidden_width=None, num_samples=7,
                  noise_variance=0.1, seed=0, train_inducing=True, ard=True,
                  inner_q_sqrt_scale=1e-2):
        """Build a model whose inducing inputs are a seeded random subset of ``X``.

        Deeper layers take their inducing inputs from the same rows mapped
        through the skip connections, which is where the mean propagation
        of an untrained stack puts them.
        """
        X = np.asarray(X, dtype=np.float64)
        n, d = X.shape
        if depth < 1:
            raise ValueError("depth must be >= 1")
        width = d if hidden_width is None else int(hidden_width)
        dims = [d] + [width] * (depth - 1) + [1]
        rng = np.random.default_rng(seed)
        _, first = np.unique(X, axis=0, return_index=True)
        distinct = np.sort(first)
        m = min(int(num_inducing), len(distinct))
        rows = np.sort(rng.choice(distinct, size=m, replace=False))
        Z = X[rows]
        layers = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == depth - 1
            layer = SVGPLayer(Z, d_out, kernel=RBFKernel(d_in, ard=ard),
                              q_sqrt_scale=1.0 if last else inner_q_sqrt_scale,
                              train_inducing=train_inducing)
            layers.append(layer)
            Z = Z @ layer.mean_weights
        return cls(layers, noise_variance=noise_variance, num_samples=num_samples)

    @property
    def depth(self):
        return len(self.layers)

    @property
    def noise_variance(self):
        return float(np.exp(self.log_noise.data))

    def parameters(self):
        params = {}
        for i, layer in enumerate(self.layers):
            for name, tensor in layer.parameters().items():
                params[f"layers.{i}.{name}"] = tensor
        params["log_noise"] = self.log_noise
        return params

    def snapshot(self):
        return {name: t.data.copy() for name, t in self.parameters().items()}

    def load_snapshot(self, values):
        params = self.parameters()
        for name, value in values.items():
            params[name].data = np.array(value, dtype=np.float64).reshape(params[name].shape)

    def draw_eps(self, num_points, num_samples, rng):
        """Standard normal draws for every hidden layer, each ``(S, N, width)``."""
        return [rng.standard_normal((num_samples, num_points, layer.output_dim))
                for layer in self.layers[:-1]]

    def propagate(self, X, rng=None, eps=None, num_samples=None):
        """Per-sample final-layer moments, each of shape ``(S, N)``."""
        X = ad.as_tensor(X)
        S = self.num_samples if num_samples is None else int(num_samples)
        if eps is None and self.depth == 1:
            eps = []
        if eps is None:
            if rng is None:
                raise ContractError("propagate needs either a random generator or explicit eps")
            eps = self.draw_eps(X.shape[0], S, rng)
        if len(eps) != self.depth - 1:
            raise ContractError(f"expected {self.depth - 1} eps arrays, got {len(eps)}")
        F = X
        for layer, e in zip(self.layers[:-1], eps):
            F = layer.sample(F, e)
        mu, var = self.layers[-1].predict_moments(F)
        mu, var = mu[..., 0], var[..., 0]
        if mu.ndim == 1:
            mu = ad.broadcast_to(mu, (S,) + mu.shape)
            var = ad.broadcast_to(var, (S,) + var.shape)
        return mu, var

    def kl(self):
        total = ad.Tensor(0.0)
        for layer in self.layers:
            total = total + layer.kl()
        return total

    def elbo(self, X, y, num_total=None, rng=None, eps=None):
        X = ad.as_tensor(X)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        batch = y.shape[0]
        if batch < 1 or X.shape[0] != batch:
            raise ContractError("elbo needs a non-empty batch with matching X and y")
        num_total = batch if num_total is None else int(num_total)
        if num_total < batch:
            raise ContractError("num_total must be >= the batch size")
        mu, var = self.propagate(X, rng=rng, eps=eps)
        noise = ad.exp(self.log_noise)
        loglik = expected_gaussian_loglik(y, mu, var, noise)
        data_term = ad.tsum(loglik) * (num_total / (batch * mu.shape[0]))
        value = data_term - self.kl()
        if not np.isfinite(value.data):
            raise TrainingDivergenceError("non-finite ELBO", snapshot=self.snapshot())
        return value

    def predict(self, X, num_samples=None, rng=None, eps=None, chunk_size=512):
        """Gaussian-mixture moments over ``num_samples`` propagated samples.

        The returned variance includes the observation noise.
        """
        X = np.asarray(X, dtype=np.float64)
        S = self.num_samples if num_samples is None else int(num_samples)
        if eps is None and rng is None:
            rng = np.random.default_rng(0)
        means, variances = [], []
        with ad.no_grad():
            for start in range(0, max(len(X), 1), chunk_size):
                sl = slice(start, start + chunk_size)
                chunk_eps = None if eps is None else [e[:, sl] for e in eps]
                mu, var = self.propagate(X[sl], rng=rng, eps=chunk_eps, num_samples=S)
                means.append(mu.data)
                variances.append(var.data)
        mus = np.concatenate(means, axis=1)
        vars_ = np.concatenate(variances, axis=1)
        mean = mus.mean(axis=0)
        second = (vars_ + mus**2).mean(axis=0)
        variance = np.maximum(second - mean**2, 0.0) + self.noise_variance
        return PredictiveDistribution(mean, variance, mus, vars_)

    # -- serialisation -------------------------------------------------
    def config(self):
        return {
            "dims": [self.layers[0].input_dim] + [layer.output_dim for layer in self.layers],
            "num_inducing": [layer.num_inducing for layer in self.layers],
            "num_samples": self.num_samples,
            "ard": [layer.kernel.ard for layer in self.layers],
            "train_inducing": [layer.train_inducing for layer in self.layers],
            "jitter": [layer.jitter for layer in self.layers],
        }

    @classmethod
    def from_config(cls, config, values):
        dims = config["dims"]
        layers = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            Z = np.asarray(values[f"layers.{i}.Z"], dtype=np.float64)
            layers.append(SVGPLayer(Z, d_out, kernel=RBFKernel(d_in, ard=config["ard"][i]),
                                    train_inducing=config["train_inducing"][i],
                                    jitter=config["jitter"][i]))
        model = cls(layers, num_samples=config["num_samples"])
        model.load_snapshot(values)
        return model
