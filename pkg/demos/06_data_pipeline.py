"""
From a station CSV to model inputs
==================================

Station CSVs carry one row per station and hour. Loading drops rows without a
usable target and forward-fills meteorology within each station. It also
derives cyclic encodings for hour of day and wind direction, plus one-hot
weather columns. Normalisation statistics come from training stations only.
"""

import tempfile
from pathlib import Path

import numpy as np

from aqdgp import data as dio

csv_text = """station_id,timestamp,latitude,longitude,temperature,pressure,humidity,wind_speed,wind_direction,weather,pm25
1001,2014-05-01T00:00:00,39.93,116.34,18.1,1012,40,2.1,NE,0,61
1001,2014-05-01T01:00:00,39.93,116.34,,1012,42,1.8,90,1,NA
1001,2014-05-01T02:00:00,39.93,116.34,16.9,1011,45,1.1,E,1,74
1002,2014-05-01T00:00:00,39.99,116.47,17.4,1013,38,2.5,SW,0,55
1002,2014-05-01T01:00:00,39.99,116.47,17.0,1013,39,2.9,225,0,58
1003,2014-05-01T00:00:00,39.87,116.40,18.6,1012,41,1.5,S,2,80
"""

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "stations.csv"
    path.write_text(csv_text)
    ds = dio.load_csv(path)

print(len(ds), "rows;", ds.n_dropped, "dropped;", "stations:", ds.station_ids)
print(ds.frame[["station_id", "temperature", "wind_sin", "wind_cos", "hour_sin"]].round(3))

# %%
# The default feature set, with the weather one-hots expanded.

names = dio.resolve_features(ds)
print(names)
X = dio.design_matrix(ds, names)

# %%
# Station folds and per-fold normalisation. With so few rows some columns are
# constant on the training stations; those are dropped with a warning.

plan = dio.make_station_folds(ds, k=3, seed=0)
train, test = plan.split(ds, 0)
Xtr = dio.design_matrix(train, names)
stats = dio.fit_normalizer(Xtr, train.targets, names)
print("kept features:", stats.names)
print("train target mean/sd:", stats.target_mean, round(stats.target_std, 3))
z = stats.apply(dio.select_columns(Xtr, names, stats.names))
print("normalised column means:", np.abs(z.mean(0)).max() < 1e-12)
