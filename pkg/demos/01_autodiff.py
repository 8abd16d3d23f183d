"""
Reverse-mode gradients through linear algebra
=============================================

The deep GP is trained on a small tape-based autodiff written on top of
numpy. This script differentiates a Gaussian log-density, which needs a
Cholesky factor and a triangular solve, and compares the tape's gradient
with central finite differences.
"""

import logging

import numpy as np

from aqdgp import autodiff as ad
from aqdgp.kernels import RBFKernel

rng = np.random.default_rng(0)
X = rng.uniform(-2, 2, size=(12, 2))
y = np.sin(X[:, 0]) + 0.1 * rng.normal(size=12)

# %%
# Log marginal likelihood of a GP as a function of the kernel's log
# lengthscales. Everything below is recorded on the tape.

kernel = RBFKernel(2, variance=1.0, lengthscales=[0.8, 1.2])


def log_density(kernel):
    K = kernel.matrix(X) + 0.1 * np.eye(len(y))
    L = ad.cholesky(K)
    a = ad.trisolve(L, y.reshape(-1, 1))
    return -0.5 * ad.tsum(ad.square(a)) - ad.tsum(ad.log(ad.diagonal(L)))


value = log_density(kernel)
value.backward()
print("log density:", value.item())
print("tape gradient:", kernel.log_lengthscales.grad)

# %%
# The same derivative by central differences.


def as_function(log_ls):
    k = RBFKernel(2, variance=1.0, lengthscales=np.exp(log_ls))
    with ad.no_grad():
        return log_density(k).item()


fd = ad.numerical_gradient(as_function, kernel.log_lengthscales.data.copy())
print("finite differences:", fd)
print("relative error:", np.linalg.norm(fd - kernel.log_lengthscales.grad) / np.linalg.norm(fd))

# %%
# A singular matrix is rescued by escalating diagonal jitter; the
# escalation is logged at INFO level.

logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
rank_one = np.ones((3, 3))
print(ad.cholesky(rank_one).data.round(4))
