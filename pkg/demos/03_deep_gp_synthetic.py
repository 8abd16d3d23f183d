"""
Training a deep GP on a synthetic station field
===============================================

Synthetic stations sit in the unit square and observe a latent GP over
(latitude, longitude, hour) plus noise. A two-layer deep GP is trained on
two thirds of the stations and asked to predict the rest, which mimics
inference at unmonitored locations. Expect about a minute of runtime.
"""

import numpy as np

from aqdgp import data as dio
from aqdgp.metrics import MetricReport
from aqdgp.training import TrainConfig, Trainer, prepare_split

ds = dio.generate_synthetic(seed=0, n_stations=15, n_times=40, lengthscales=(0.7, 0.7, 6.0),
                            noise=0.01)
plan = dio.make_station_folds(ds, k=3, seed=0)
train_ds, test_ds = plan.split(ds, fold=0)
print("held-out stations:", plan.stations_in(0))

names = list(dio.SYNTHETIC_FEATURES)
Xtr, ytr, Xte, stats = prepare_split(train_ds, test_ds, names)

# %%
# Fewer epochs than the 500 used for evaluation keep the demo short.

config = TrainConfig(epochs=150, num_inducing=50, num_samples=5)
model = config.build_model(Xtr)
trainer = Trainer(model, Xtr, ytr, config)
history = trainer.run()
print("ELBO first/last epoch:", round(history.elbo[0], 1), round(history.elbo[-1], 1))

# %%
# Predictions are a Gaussian mixture over propagated samples; bands are
# mean +/- 1.96 sd in original units.

pred = model.predict(Xte, num_samples=50, rng=np.random.default_rng(0))
mean = stats.invert_target(pred.mean)
sd = np.sqrt(stats.invert_variance(pred.variance))
truth = test_ds.targets
print(MetricReport.compute(truth, mean))
print("band coverage:", np.mean(np.abs(truth - mean) <= 1.96 * sd).round(3))

station = test_ds.frame["station_id"] == plan.stations_in(0)[0]
for hour, (m, s, y) in enumerate(zip(mean[station][:8], sd[station][:8], truth[station][:8])):
    print(f"hour {hour}  {m:6.2f} +/- {1.96 * s:4.2f}   truth {y:6.2f}")
