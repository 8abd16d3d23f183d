"""Squared exponential (RBF) covariance with per-dimension lengthscales."""

import numpy as np

from . import autodiff as ad
from .errors import DimensionError


class RBFKernel:
    """``k(x, x') = variance * exp(-0.5 * sum_d (x_d - x'_d)**2 / lengthscale_d**2)``.

    Both hyperparameters are stored as logs so positivity is structural. With
    ``ard=False`` a single lengthscale is shared by every input dimension.
    """

    def __init__(self, input_dim, variance=1.0, lengthscales=1.0, ard=True):
        self.input_dim = int(input_dim)
        self.ard = bool(ard)
        n_scales = self.input_dim if self.ard else 1
        scales = np.broadcast_to(np.asarray(lengthscales, dtype=np.float64), (n_scales,))
        self.log_variance = ad.Tensor(np.log(variance), requires_grad=True, name="log_variance")
        self.log_lengthscales = ad.Tensor(np.log(scales).copy(), requires_grad=True,
                                          name="log_lengthscales")

    @property
    def variance(self):
        return float(np.exp(self.log_variance.data))

    @property
    def lengthscales(self):
        return np.broadcast_to(np.exp(self.log_lengthscales.data), (self.input_dim,)).copy()

    def parameters(self):
        return {"log_variance": self.log_variance, "log_lengthscales": self.log_lengthscales}

    def _check(self, X):
        if X.shape[-1] != self.input_dim:
            raise DimensionError(
                f"kernel expects {self.input_dim} input columns, got {X.shape[-1]}")

    def eval(self, x, x2):
        x = np.asarray(x, dtype=np.float64)
        x2 = np.asarray(x2, dtype=np.float64)
        if x.shape != (self.input_dim,) or x2.shape != (self.input_dim,):
            raise DimensionError(f"points must have {self.input_dim} coordinates")
        r2 = np.sum(((x - x2) / self.lengthscales) ** 2)
        return self.variance * np.exp(-0.5 * r2)

    def matrix(self, X, X2=None):
        """Covariance between the rows of ``X`` (``(..., N, D)``) and ``X2`` (``(..., M, D)``)."""
        X = ad.as_tensor(X)
        X2 = X if X2 is None else ad.as_tensor(X2)
        self._check(X)
        self._check(X2)
        inv_scale = ad.exp(-self.log_lengthscales)
        Xs = X * inv_scale
        X2s = Xs if X2 is X else X2 * inv_scale
        sq1 = ad.tsum(ad.square(Xs), axis=-1)
        sq2 = ad.tsum(ad.square(X2s), axis=-1)
        cross = ad.matmul(Xs, ad.swapaxes(X2s, -1, -2))
        r2 = ad.reshape(sq1, sq1.shape + (1,)) + ad.reshape(sq2, sq2.shape[:-1] + (1, sq2.shape[-1]))
        r2 = ad.maximum(r2 - 2.0 * cross, 0.0)
        if X2 is X:
            # exact zero self-distance; rounding would otherwise perturb the diagonal
            r2 = r2 * (1.0 - np.eye(X.shape[-2]))
        return ad.exp(self.log_variance) * ad.exp(-0.5 * r2)

    def diag(self, X):
        X = ad.as_tensor(X)
        self._check(X)
        return ad.exp(self.log_variance) * np.ones(X.shape[:-1])
