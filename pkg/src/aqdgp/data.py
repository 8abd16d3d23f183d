"""Station data: CSV ingestion, feature construction, station folds, normalisation and synthetic data."""

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import autodiff as ad
from .errors import DataError, ParameterError, SchemaError, SizeError
from .kernels import RBFKernel

logger = logging.getLogger(__name__)

COLUMNS = ("station_id", "timestamp", "latitude", "longitude", "temperature", "pressure",
           "humidity", "wind_speed", "wind_direction", "weather", "pm25")
METEO = ("temperature", "pressure", "humidity", "wind_speed", "wind_direction")

DEFAULT_FEATURES = ("latitude", "longitude", "hour_sin", "hour_cos", "temperature", "pressure",
                    "humidity", "wind_sin", "wind_cos", "weather_*")
SYNTHETIC_FEATURES = ("latitude", "longitude", "time")

BEIJING_TIME_RANGE = ("2014-05-01T00:00:00", "2015-04-30T23:59:59")

_COMPASS = {name: 22.5 * i for i, name in enumerate(
    "N NNE NE ENE E ESE SE SSE S SSW SW WSW W WNW NW NNW".split())}


@dataclass
class CSVSchema:
    """Maps logical column names to the header names found in the file."""

    columns: dict = field(default_factory=lambda: {c: c for c in COLUMNS})
    delimiter: str = ","
    time_range: tuple = None

    def column(self, logical):
        return self.columns.get(logical, logical)


@dataclass
class StationDataset:
    frame: pd.DataFrame
    stations: dict
    n_dropped: int = 0
    n_out_of_range: int = 0
    weather_categories: tuple = ()
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frame)

    @property
    def station_ids(self):
        return sorted(self.stations)

    def subset(self, mask):
        frame = self.frame[np.asarray(mask)].reset_index(drop=True)
        stations = {s: self.stations[s] for s in frame["station_id"].unique()}
        return StationDataset(frame, stations, 0, 0, self.weather_categories, dict(self.metadata))

    def rows_for_station(self, station_id):
        return self.subset(self.frame["station_id"] == station_id)

    @property
    def targets(self):
        return self.frame["pm25"].to_numpy(dtype=np.float64)

    def fingerprint(self):
        import hashlib

        raw = pd.util.hash_pandas_object(self.frame, index=False).to_numpy().tobytes()
        return hashlib.sha256(raw).hexdigest()


def _to_float(value):
    try:
        return float(value)
    except (TypeError, ValueError):
        return np.nan


def _numeric(values):
    """Exact decimal parse; ``pd.to_numeric`` can be off by one ulp."""
    return pd.Series([_to_float(v) for v in values], index=values.index, dtype=np.float64)


def _parse_timestamps(values):
    numeric = _numeric(values)
    if numeric.notna().all():
        return numeric.to_numpy(dtype=np.float64)
    parsed = pd.to_datetime(values, utc=True, errors="coerce", format="mixed")
    if parsed.isna().any():
        bad = values[parsed.isna()].iloc[0]
        raise DataError(f"unparseable timestamp {bad!r}")
    return (parsed - pd.Timestamp(0, tz="UTC")).dt.total_seconds().to_numpy()


def _parse_direction(values):
    numeric = _numeric(values)
    compass = values.astype(str).str.strip().str.upper().map(_COMPASS)
    return numeric.fillna(compass).astype(np.float64)


def _weather_code(value):
    if pd.isna(value):
        return value
    try:
        f = float(value)
    except (TypeError, ValueError):
        return str(value).strip()
    return str(int(f)) if f.is_integer() else str(f)


def load_csv(path, schema=None):
    """Read a station CSV, dropping rows whose target is missing or invalid.

    Derived columns added to the frame: ``hour_sin``/``hour_cos`` from the
    timestamp, ``wind_sin``/``wind_cos`` from the wind direction in degrees,
    and one ``weather_<code>`` indicator per weather category.
    """
    schema = schema or CSVSchema()
    try:
        raw = pd.read_csv(path, sep=schema.delimiter, dtype=str, keep_default_na=True)
    except pd.errors.EmptyDataError as exc:
        raise DataError(f"{path} is empty") from exc
    for logical in COLUMNS:
        if schema.column(logical) not in raw.columns:
            raise SchemaError(f"missing required column {schema.column(logical)!r}")
    if len(raw) == 0:
        raise DataError(f"{path} has a header but no rows")
    raw = raw.rename(columns={schema.column(c): c for c in COLUMNS})[list(COLUMNS)]
    return _build_dataset(raw, schema.time_range)


def _build_dataset(raw, time_range=None):
    df = pd.DataFrame({"station_id": raw["station_id"].astype(str).str.strip()})
    df["timestamp"] = _parse_timestamps(raw["timestamp"])
    for col in ("latitude", "longitude", "temperature", "pressure", "humidity", "wind_speed"):
        df[col] = _numeric(raw[col])
    df["wind_direction"] = _parse_direction(raw["wind_direction"])
    df["weather"] = raw["weather"].map(_weather_code)
    df["pm25"] = _numeric(raw["pm25"])

    bad = df["pm25"].isna() | (df["pm25"] < 0) | df["latitude"].isna() | df["longitude"].isna()
    n_dropped = int(bad.sum())
    if n_dropped:
        logger.info("dropped %d rows with missing or invalid target/coordinates", n_dropped)
    df = df[~bad]
    n_out = 0
    if time_range is not None:
        lo, hi = (pd.Timestamp(t, tz="UTC").timestamp() for t in time_range)
        inside = (df["timestamp"] >= lo) & (df["timestamp"] <= hi)
        n_out = int((~inside).sum())
        df = df[inside]
    if len(df) == 0:
        raise DataError("no usable rows")
    df = df.sort_values(["station_id", "timestamp"], kind="stable").reset_index(drop=True)

    # per-station forward fill, then global mean (mode for the category)
    filled = df.groupby("station_id", sort=False)[list(METEO) + ["weather"]].ffill()
    for col in METEO:
        df[col] = filled[col].fillna(filled[col].mean()).fillna(0.0)
    weather = filled["weather"]
    df["weather"] = weather.fillna(weather.mode().iloc[0] if weather.notna().any() else "0")

    hours = (df["timestamp"] / 3600.0) % 24
    df["hour_sin"] = np.sin(2 * np.pi * hours / 24)
    df["hour_cos"] = np.cos(2 * np.pi * hours / 24)
    rad = np.radians(df["wind_direction"])
    df["wind_sin"] = np.sin(rad)
    df["wind_cos"] = np.cos(rad)
    df["time"] = df["timestamp"] / 3600.0
    categories = tuple(sorted(df["weather"].unique(), key=_category_key))
    for cat in categories:
        df[f"weather_{cat}"] = (df["weather"] == cat).astype(np.float64)

    first = df.groupby("station_id", sort=True)[["latitude", "longitude"]].first()
    stations = {sid: (float(r.latitude), float(r.longitude)) for sid, r in first.iterrows()}
    return StationDataset(df, stations, n_dropped, n_out, categories)


def _category_key(code):
    try:
        return (0, float(code), code)
    except ValueError:
        return (1, 0.0, code)


def resolve_features(dataset, features=DEFAULT_FEATURES, weather_categories=None):
    cats = dataset.weather_categories if weather_categories is None else weather_categories
    names = []
    for f in features:
        if f == "weather_*":
            names.extend(f"weather_{c}" for c in cats)
        else:
            names.append(f)
    return names


def design_matrix(dataset, names):
    """Feature matrix with the given resolved column names; unseen one-hot columns are zero."""
    cols = []
    for name in names:
        if name in dataset.frame:
            cols.append(dataset.frame[name].to_numpy(dtype=np.float64))
        elif name.startswith("weather_"):
            cols.append(np.zeros(len(dataset)))
        else:
            raise SchemaError(f"unknown feature {name!r}")
    return np.column_stack(cols) if cols else np.empty((len(dataset), 0))


# -- folds -----------------------------------------------------------------

@dataclass
class FoldPlan:
    assignment: dict
    k: int

    def stations_in(self, fold):
        return sorted(s for s, f in self.assignment.items() if f == fold)

    def split(self, dataset, fold):
        """``(train, test)`` datasets; the test fold's stations never appear in train."""
        test_ids = set(self.stations_in(fold))
        in_test = dataset.frame["station_id"].isin(test_ids).to_numpy()
        return dataset.subset(~in_test), dataset.subset(in_test)


def make_station_folds(dataset_or_ids, k, seed=0):
    ids = dataset_or_ids.station_ids if isinstance(dataset_or_ids, StationDataset) \
        else sorted(dataset_or_ids)
    if k < 2:
        raise ParameterError("need at least 2 folds")
    if len(ids) < k:
        raise ParameterError(f"{len(ids)} stations cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldPlan({ids[j]: i % k for i, j in enumerate(order)}, k)


# -- normalisation ---------------------------------------------------------

@dataclass
class NormalizationStats:
    names: list
    mean: np.ndarray
    std: np.ndarray
    target_mean: float
    target_std: float
    dropped: list = field(default_factory=list)

    def apply(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def invert(self, Z):
        return np.asarray(Z, dtype=np.float64) * self.std + self.mean

    def apply_target(self, y):
        return (np.asarray(y, dtype=np.float64) - self.target_mean) / self.target_std

    def invert_target(self, z):
        return np.asarray(z, dtype=np.float64) * self.target_std + self.target_mean

    def invert_variance(self, v):
        return np.asarray(v, dtype=np.float64) * self.target_std**2

    def to_dict(self):
        return {"names": list(self.names), "mean": self.mean.tolist(), "std": self.std.tolist(),
                "target_mean": self.target_mean, "target_std": self.target_std,
                "dropped": list(self.dropped)}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["names"]), np.array(d["mean"], dtype=np.float64),
                   np.array(d["std"], dtype=np.float64), float(d["target_mean"]),
                   float(d["target_std"]), list(d.get("dropped", [])))


def fit_normalizer(X, y, names):
    """z-score statistics from training rows only.

    Zero-variance feature columns are dropped with a warning; select the kept
    columns with :func:`select_columns` before calling ``apply``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(y) == 0:
        raise DataError("cannot normalise an empty training set")
    std = X.std(axis=0)
    keep = std > 0
    dropped = [n for n, k in zip(names, keep) if not k]
    if dropped:
        warnings.warn(f"dropping zero-variance features: {', '.join(dropped)}", stacklevel=2)
    t_std = float(y.std())
    if t_std == 0:
        raise DataError("training target has zero variance")
    return NormalizationStats([n for n, k in zip(names, keep) if k], X.mean(axis=0)[keep],
                              std[keep], float(y.mean()), t_std, dropped)


def select_columns(X, names, keep):
    index = {n: i for i, n in enumerate(names)}
    return np.asarray(X)[:, [index[n] for n in keep]]


# -- synthetic data --------------------------------------------------------

SYNTHETIC_START = pd.Timestamp("2014-05-01T00:00:00", tz="UTC").timestamp()
MAX_SYNTHETIC_ROWS = 5000


def draw_latent(points, variance, lengthscales, rng):
    """One joint GP draw at ``points``; duplicate rows receive identical values."""
    points = np.asarray(points, dtype=np.float64)
    unique, inverse = np.unique(points, axis=0, return_inverse=True)
    kernel = RBFKernel(points.shape[1], variance=variance, lengthscales=lengthscales)
    with ad.no_grad():
        K = kernel.matrix(unique).data
        L = ad.cholesky(K, jitter=1e-8 * variance).data
    return (L @ rng.standard_normal(len(unique)))[inverse.reshape(-1)]


def generate_synthetic(seed, n_stations, n_times, variance=1.0, lengthscales=(0.5, 0.5, 12.0),
                       noise=0.1, offset=None):
    """Stations uniform in the unit square, hourly timestamps, GP latent over (lat, lon, hour).

    Targets are ``offset + latent + N(0, noise)``; the offset (default five
    standard deviations) keeps them non-negative like a concentration.
    Meteorological columns are seeded filler independent of the target.
    """
    if n_stations < 1 or n_times < 1:
        raise ParameterError("sizes must be positive")
    n = n_stations * n_times
    if n > MAX_SYNTHETIC_ROWS:
        raise SizeError(f"{n} rows exceeds the {MAX_SYNTHETIC_ROWS}-row joint covariance limit")
    if offset is None:
        offset = 5.0 * float(np.sqrt(variance + noise))
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0.0, 1.0, size=(n_stations, 2))
    hours = np.arange(n_times, dtype=np.float64)
    st = np.repeat(np.arange(n_stations), n_times)
    tt = np.tile(hours, n_stations)
    inputs = np.column_stack([coords[st, 0], coords[st, 1], tt])
    latent = draw_latent(inputs, variance, lengthscales, rng)
    noisy = offset + latent + np.sqrt(noise) * rng.standard_normal(n)

    width = max(3, len(str(n_stations - 1)))
    frame = pd.DataFrame({
        "station_id": [f"S{i:0{width}d}" for i in st],
        "timestamp": SYNTHETIC_START + 3600.0 * tt,
        "latitude": inputs[:, 0],
        "longitude": inputs[:, 1],
        "temperature": rng.normal(15.0, 8.0, n),
        "pressure": rng.normal(1013.0, 6.0, n),
        "humidity": rng.uniform(10.0, 95.0, n),
        "wind_speed": rng.gamma(2.0, 1.5, n),
        "wind_direction": rng.uniform(0.0, 360.0, n),
        "weather": rng.integers(0, 4, n).astype(str),
        "pm25": noisy,
    })
    dataset = _build_dataset(frame)
    dataset.metadata = {
        "generator": "rbf-gp",
        "seed": int(seed),
        "n_stations": int(n_stations),
        "n_times": int(n_times),
        "variance": float(variance),
        "lengthscales": [float(v) for v in np.broadcast_to(lengthscales, (3,))],
        "noise": float(noise),
        "offset": float(offset),
        "latent_inputs": ["latitude", "longitude", "hours since start"],
        "features": list(SYNTHETIC_FEATURES),
    }
    dataset.frame["latent"] = np.nan
    order = dataset.frame.index
    # _build_dataset sorts by (station, time) which matches the generation order
    dataset.frame.loc[order, "latent"] = offset + latent
    return dataset


def write_csv(dataset, path, delimiter=","):
    out = dataset.frame[list(COLUMNS)].copy()
    ts = out["timestamp"]
    if np.all(np.mod(ts, 1) == 0):
        out["timestamp"] = ts.astype(np.int64)
    out.to_csv(path, sep=delimiter, index=False, float_format=None)


def metadata_path(csv_path):
    return f"{csv_path}.meta.json"


def write_metadata(dataset, csv_path):
    with open(metadata_path(csv_path), "w") as fh:
        json.dump(dataset.metadata, fh, indent=2, sort_keys=True)


def read_metadata(csv_path):
    try:
        with open(metadata_path(csv_path)) as fh:
            return json.load(fh)
    except FileNotFoundError:
        return None
