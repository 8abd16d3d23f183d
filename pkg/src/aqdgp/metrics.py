"""Gaussian expected log-likelihood and regression scores."""

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, MetricUndefinedError, NumericDomainError

LOG_2PI = float(np.log(2 * np.pi))


def expected_gaussian_loglik(y, mu, var, noise):
    """``E_{f ~ N(mu, var)} log N(y | f, noise)``.

    Works elementwise on floats, arrays, or :class:`~aqdgp.autodiff.Tensor`
    operands; a tensor result is returned whenever any operand is a tensor.
    """
    noise_val = noise.data if isinstance(noise, ad.Tensor) else np.asarray(noise)
    if np.any(noise_val <= 0):
        raise NumericDomainError("noise variance must be positive")
    if any(isinstance(v, ad.Tensor) for v in (y, mu, var, noise)):
        resid = ad.as_tensor(y) - mu
        return -0.5 * LOG_2PI - 0.5 * ad.log(noise) - (ad.square(resid) + var) / (2.0 * noise)
    y, mu, var = (np.asarray(v, dtype=np.float64) for v in (y, mu, var))
    out = -0.5 * np.log(2 * np.pi * noise_val) - ((y - mu) ** 2 + var) / (2 * noise_val)
    return float(out) if out.ndim == 0 else out


def _pair(y_true, y_pred):
    y_true = np.asarray(y_true, dtype=np.float64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise DimensionError(f"length mismatch: {y_true.size} vs {y_pred.size}")
    if y_true.size == 0:
        raise DimensionError("metrics need at least one value")
    return y_true, y_pred


def rmse(y_true, y_pred):
    y_true, y_pred = _pair(y_true, y_pred)
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)))


def mae(y_true, y_pred):
    y_true, y_pred = _pair(y_true, y_pred)
    return float(np.mean(np.abs(y_true - y_pred)))


def r2(y_true, y_pred):
    y_true, y_pred = _pair(y_true, y_pred)
    total = np.sum((y_true - y_true.mean()) ** 2)
    if total == 0:
        raise MetricUndefinedError("R^2 is undefined for constant targets")
    return float(1.0 - np.sum((y_true - y_pred) ** 2) / total)


@dataclass
class MetricReport:
    rmse: float
    mae: float
    r2: float

    def __post_init__(self):
        # floating slack: rmse and mae coincide for constant absolute residuals
        if not self.rmse >= self.mae * (1 - 1e-12) or self.mae < 0:
            raise AssertionError(f"inconsistent metrics: rmse={self.rmse} mae={self.mae}")

    @classmethod
    def compute(cls, y_true, y_pred):
        return cls(rmse(y_true, y_pred), mae(y_true, y_pred), r2(y_true, y_pred))

    def as_dict(self):
        return asdict(self)

