"""Deep Gaussian processes with doubly stochastic variational inference for station air-quality data."""

__version__ = "0.1.0"

from .autodiff import Tensor, no_grad
from .kernels import RBFKernel
from .layers import SVGPLayer
from .metrics import MetricReport, mae, r2, rmse
from .model import DGPModel, PredictiveDistribution

__all__ = ["Tensor", "no_grad", "RBFKernel", "SVGPLayer", "DGPModel", "PredictiveDistribution",
           "MetricReport", "rmse", "mae", "r2", "__version__"]
