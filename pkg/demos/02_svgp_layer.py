"""
One sparse variational GP layer
===============================

A layer summarises its posterior with M inducing points in the whitened
parameterisation. At the prior (zero mean, identity covariance) the layer
returns the GP prior moments shifted by its fixed skip mean, and its KL term
is zero. Moving the variational parameters away from the prior changes both.
"""

import numpy as np

from aqdgp.layers import SVGPLayer

rng = np.random.default_rng(1)
Z = rng.normal(size=(6, 2))
layer = SVGPLayer(Z, output_dim=2)
F = rng.normal(size=(4, 2))

mu, var = layer.predict_moments(F)
print("prior mean equals the skip map:", np.allclose(mu.data, F @ layer.mean_weights))
print("prior variance:", var.data[:, 0])
print("KL at the prior:", layer.kl().item())

# %%
# Perturb the variational mean and shrink the covariance.

layer.q_mu.data = rng.normal(size=layer.q_mu.shape)
layer.set_q_sqrt(0.3 * np.stack([np.eye(6), np.eye(6)]))
mu, var = layer.predict_moments(F)
print("posterior variance:", var.data[:, 0].round(4))
print("KL:", round(layer.kl().item(), 4))

# %%
# Reparameterised samples: mean + sd * eps. Averaging many of them
# recovers the moments.

eps = rng.standard_normal((20000, 4, 2))
draws = layer.sample(F, eps).data
print("sample mean vs mu:", draws.mean(0)[:, 0].round(3), mu.data[:, 0].round(3))
print("sample var vs var:", draws.var(0)[:, 0].round(3), var.data[:, 0].round(3))
