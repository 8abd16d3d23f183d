"""Sparse variational GP layer in the whitened parameterisation.

The inducing outputs are written ``u = chol(K_ZZ) v`` with prior
``v ~ N(0, I)`` and variational posterior ``q(v_j) = N(m_j, S_j)`` for each
output column ``j``, where ``S_j = L_j L_j^T``. A fixed linear mean function
``F @ W`` carries the input through the layer (the skip connection).
"""

import logging

import numpy as np

from . import autodiff as ad
from .errors import DecompositionError, DimensionError, LayerDegenerateError
from .kernels import RBFKernel

logger = logging.getLogger(__name__)

VAR_FLOOR = 1e-12


def skip_matrix(d_in, d_out):
    """Identity, truncated (``d_in > d_out``) or zero padded (``d_in < d_out``)."""
    return np.eye(d_in, d_out)


class SVGPLayer:
    def __init__(self, Z, output_dim, kernel=None, q_sqrt_scale=1.0, train_inducing=True,
                 jitter=1e-6, ard=True):
        Z = np.array(Z, dtype=np.float64)
        if Z.ndim != 2 or Z.shape[0] < 1:
            raise DimensionError("inducing inputs must be an (M, D_in) array with M >= 1")
        if len(np.unique(Z, axis=0)) != len(Z):
            raise DimensionError("inducing inputs contain duplicate rows")
        self.num_inducing, self.input_dim = Z.shape
        self.output_dim = int(output_dim)
        self.kernel = kernel if kernel is not None else RBFKernel(self.input_dim, ard=ard)
        self.Z = ad.Tensor(Z, requires_grad=train_inducing, name="Z")
        self.train_inducing = bool(train_inducing)
        self.q_mu = ad.Tensor(np.zeros((self.num_inducing, self.output_dim)), requires_grad=True,
                              name="q_mu")
        M, J = self.num_inducing, self.output_dim
        self.q_sqrt_lower = ad.Tensor(np.zeros((J, M, M)), requires_grad=True, name="q_sqrt_lower")
        self.q_sqrt_logdiag = ad.Tensor(np.full((J, M), np.log(q_sqrt_scale)), requires_grad=True,
                                        name="q_sqrt_logdiag")
        self.mean_weights = skip_matrix(self.input_dim, self.output_dim)
        self.jitter = float(jitter)
        self.clamp_count = 0

    def parameters(self):
        params = {f"kernel.{k}": v for k, v in self.kernel.parameters().items()}
        params.update(Z=self.Z, q_mu=self.q_mu, q_sqrt_lower=self.q_sqrt_lower,
                      q_sqrt_logdiag=self.q_sqrt_logdiag)
        return params

    def q_sqrt(self):
        """Cholesky factors of the variational covariances, shape ``(D_out, M, M)``."""
        return ad.tril(self.q_sqrt_lower, -1) + ad.diag_embed(ad.exp(self.q_sqrt_logdiag))

    def set_q_sqrt(self, factors):
        factors = np.asarray(factors, dtype=np.float64)
        diag = np.diagonal(factors, axis1=-2, axis2=-1)
        if np.any(diag <= 0):
            raise ValueError("variational Cholesky factors need a positive diagonal")
        self.q_sqrt_lower.data = np.tril(factors, -1)
        self.q_sqrt_logdiag.data = np.log(diag).copy()

    def _kzz_cholesky(self):
        Kzz = self.kernel.matrix(self.Z)
        mean_diag = float(np.mean(np.diag(Kzz.data)))
        try:
            return ad.cholesky(Kzz, jitter=self.jitter * mean_diag)
        except DecompositionError as exc:
            raise LayerDegenerateError(f"inducing covariance is degenerate: {exc}") from exc

    def predict_moments(self, F):
        """Marginal mean and variance, each ``(..., N, D_out)``, at inputs ``F`` ``(..., N, D_in)``."""
        F = ad.as_tensor(F)
        if F.shape[-1] != self.input_dim:
            raise DimensionError(f"layer expects {self.input_dim} input columns, got {F.shape[-1]}")
        L = self._kzz_cholesky()
        Kzf = self.kernel.matrix(self.Z, F)
        A = ad.trisolve(L, Kzf)
        At = ad.swapaxes(A, -1, -2)
        mu = ad.matmul(F, self.mean_weights) + ad.matmul(At, self.q_mu)

        M, N = A.shape[-2], A.shape[-1]
        batch = A.shape[:-2]
        prior_var = self.kernel.diag(F) - ad.tsum(ad.square(A), axis=-2)
        # (M, batch*N) so the projection is one GEMM per output column
        A_flat = ad.reshape(ad.transpose(A, (A.ndim - 2,) + tuple(range(A.ndim - 2)) + (A.ndim - 1,)),
                            (M, -1))
        proj = ad.matmul(ad.swapaxes(self.q_sqrt(), -1, -2), A_flat)
        post_var = ad.reshape(ad.tsum(ad.square(proj), axis=-2), (self.output_dim,) + batch + (N,))
        post_var = ad.transpose(post_var, tuple(range(1, len(batch) + 2)) + (0,))
        var = ad.reshape(prior_var, prior_var.shape + (1,)) + post_var
        clamped = int(np.count_nonzero(var.data < VAR_FLOOR))
        if clamped:
            self.clamp_count += clamped
            logger.debug("clamped %d negative variances", clamped)
        return mu, ad.maximum(var, VAR_FLOOR)

    def sample(self, F, eps):
        mu, var = self.predict_moments(F)
        return mu + ad.sqrt(var) * eps

    def kl(self):
        L = self.q_sqrt()
        trace = ad.tsum(ad.square(L))
        mahal = ad.tsum(ad.square(self.q_mu))
        logdet = 2.0 * ad.tsum(self.q_sqrt_logdiag)
        return 0.5 * (trace + mahal - self.num_inducing * self.output_dim - logdet)
