"""Command line front end: ``aqdgp {train,cv,gridsearch,predict,synth}``.

Values resolve as built-in default < ``--config`` file < explicit flag.
Config keys are the long flag names without dashes (``band-z`` and
``band_z`` are both accepted). Exit status is 0 on success, 1 on a runtime
error (one ``aqdgp: error[<code>]: ...`` line on stderr) and 2 on usage errors.
"""

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys

import numpy as np
import pandas as pd

from . import __version__
from . import data as dataio
from .baselines import planar_coordinates
from .checkpoint import atomic_write_text, dumps, load_checkpoint, save_checkpoint
from .errors import AQDGPError, ParameterError, StationLookupError
from .training import (BaselineConfig, GridSpec, TrainConfig, Trainer, baseline_grid,
                       cross_validate, grid_search)

logger = logging.getLogger("aqdgp")

# every flag that may also come from the config file
OVERRIDABLE = (
    "seed", "epochs", "lr", "inducing", "samples", "depth", "folds", "band-z", "batch-size",
    "hidden-width", "predict-samples", "features", "workers", "station", "coords", "start", "end",
    "checkpoint", "idw-power", "knn-k", "grid-inducing", "grid-samples", "grid-lr",
    "grid-idw-power", "grid-knn-k", "stations", "times", "variance", "lengthscales", "noise",
)
DEFAULTS = {"seed": 0, "folds": 3, "band-z": 1.96, "workers": 1, "idw-power": 2.0, "knn-k": 5,
            "stations": 30, "times": 60, "variance": 1.0, "lengthscales": "0.5,0.5,12",
            "noise": 0.1}

TABLE1_EXTERNAL_ROWS = ("Random Forest", "XGBoost (XGB)", "Support Vector Regressor (SVR)")


def _add_common(p, data=True):
    if data:
        p.add_argument("--data", required=True, help="station CSV file")
    p.add_argument("--config", help="JSON or YAML file whose keys mirror the flags")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")


def _add_model(p):
    p.add_argument("--epochs", type=int, help="training epochs (default 500)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 0.05)")
    p.add_argument("--inducing", type=int, help="inducing points per layer (default 100)")
    p.add_argument("--samples", type=int, help="Monte Carlo samples S (default 7)")
    p.add_argument("--depth", type=int, help="number of GP layers (default 2)")
    p.add_argument("--hidden-width", type=int, help="hidden layer width (default: input dim)")
    p.add_argument("--batch-size", type=int, help="minibatch size (default: auto)")
    p.add_argument("--predict-samples", type=int, help="samples used for prediction (default 50)")
    p.add_argument("--features", help="comma separated feature list; 'weather_*' expands")


def build_parser():
    parser = argparse.ArgumentParser(prog="aqdgp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"aqdgp {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a deep GP on all rows and write a checkpoint")
    _add_common(p)
    _add_model(p)

    p = sub.add_parser("cv", help="station-fold cross-validation against IDW, KNN and exact GP")
    _add_common(p)
    _add_model(p)
    p.add_argument("--folds", type=int, help="number of station folds (default 3)")
    p.add_argument("--band-z", type=float, help="band half-width in standard deviations")
    p.add_argument("--idw-power", type=float)
    p.add_argument("--knn-k", type=int)

    p = sub.add_parser("gridsearch", help="grid search over inducing points, samples and rate")
    _add_common(p)
    _add_model(p)
    p.add_argument("--folds", type=int, help="number of station folds (default 3)")
    p.add_argument("--grid-inducing", help="comma separated (default 25,40,60,100)")
    p.add_argument("--grid-samples", help="comma separated (default 3,5,7)")
    p.add_argument("--grid-lr", help="comma separated (default 0.01,0.05,0.1)")
    p.add_argument("--workers", type=int, help="parallel worker processes (default 1)")
    p.add_argument("--grid-idw-power", help="comma separated IDW powers for a baseline grid")
    p.add_argument("--grid-knn-k", help="comma separated KNN k values for a baseline grid")

    p = sub.add_parser("predict", help="export a prediction series with uncertainty bands")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint.json written by train")
    target = p.add_mutually_exclusive_group()
    target.add_argument("--station", help="station id present in --data")
    target.add_argument("--coords", help="LAT,LON of an unmonitored location")
    p.add_argument("--start", help="first timestamp (ISO-8601 or epoch seconds)")
    p.add_argument("--end", help="last timestamp (ISO-8601 or epoch seconds)")
    p.add_argument("--band-z", type=float, help="band half-width in standard deviations")
    p.add_argument("--predict-samples", type=int)

    p = sub.add_parser("synth", help="generate a synthetic GP station dataset")
    _add_common(p, data=False)
    p.add_argument("--stations", type=int, help="number of stations (default 30)")
    p.add_argument("--times", type=int, help="hourly timestamps per station (default 60)")
    p.add_argument("--variance", type=float, help="signal variance (default 1)")
    p.add_argument("--lengthscales",
                   help="lat,lon,hours lengthscales of the generating kernel (default 0.5,0.5,12)")
    p.add_argument("--noise", type=float, help="noise variance (default 0.1)")
    return parser


def _load_config_file(path):
    if not path:
        return {}
    with open(path) as fh:
        if path.endswith((".yml", ".yaml")):
            import yaml

            cfg = yaml.safe_load(fh) or {}
        else:
            cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ParameterError("config file must hold a mapping")
    return {k.replace("_", "-"): v for k, v in cfg.items()}


def resolve(args):
    """Merge defaults, config file and flags into one dict keyed by flag name."""
    file_cfg = _load_config_file(getattr(args, "config", None))
    unknown = set(file_cfg) - set(OVERRIDABLE)
    if unknown:
        raise ParameterError(f"unknown config keys: {', '.join(sorted(unknown))}")
    merged = dict(DEFAULTS)
    merged.update(file_cfg)
    for key in OVERRIDABLE:
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            merged[key] = value
    return merged


def train_config(opts):
    mapping = {"epochs": "epochs", "lr": "learning_rate", "inducing": "num_inducing",
               "samples": "num_samples", "depth": "depth", "seed": "seed",
               "batch-size": "batch_size", "hidden-width": "hidden_width",
               "predict-samples": "predict_samples"}
    kwargs = {field: opts[flag] for flag, field in mapping.items() if opts.get(flag) is not None}
    return TrainConfig(**kwargs)


def _features(opts, data_path):
    if opts.get("features"):
        feats = opts["features"]
        return tuple(feats.split(",")) if isinstance(feats, str) else tuple(feats)
    meta = dataio.read_metadata(data_path) if data_path else None
    if meta and meta.get("features"):
        return tuple(meta["features"])
    return dataio.DEFAULT_FEATURES


def _file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out, command, opts, outputs, data_path=None):
    manifest = {
        "command": command,
        "config": {k: v for k, v in sorted(opts.items())},
        "dataset_sha256": _file_hash(data_path) if data_path else None,
        "seed": opts.get("seed"),
        "version": __version__,
        "outputs": sorted(os.path.basename(p) for p in outputs),
    }
    atomic_write_text(os.path.join(out, "manifest.json"), dumps(manifest))


def _write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


# -- commands ------------------------------------------------------------------

def cmd_train(args, opts):
    dataset = dataio.load_csv(args.data)
    config = train_config(opts)
    names = dataio.resolve_features(dataset, _features(opts, args.data))
    X = dataio.design_matrix(dataset, names)
    stats = dataio.fit_normalizer(X, dataset.targets, names)
    Xn = stats.apply(dataio.select_columns(X, names, stats.names))
    model = config.build_model(Xn)
    trainer = Trainer(model, Xn, stats.apply_target(dataset.targets), config)
    history = trainer.run()
    ckpt = os.path.join(args.out, "checkpoint.json")
    hist = os.path.join(args.out, "history.json")
    save_checkpoint(ckpt, model, stats=stats, feature_names=names,
                    train_config=config.to_dict(), trainer_state=trainer.state_dict(),
                    extra={"weather_categories": list(dataset.weather_categories)})
    atomic_write_text(hist, dumps(history.to_dict()))
    write_manifest(args.out, "train", opts, [ckpt, hist], args.data)
    print(f"trained {len(history)} epochs; checkpoint written to {ckpt}")
    return 0


def format_table(report):
    """Table-1 style text: Model, RMSE (lower better), MAE (lower better), R^2 (higher better)."""
    lines = [f"{'Model':<42}{'RMSE (down)':>12}{'MAE (down)':>12}{'R2 (up)':>10}"]
    order = ["IDW", "KNN", "Exact GP", "DSVI"]
    for name in TABLE1_EXTERNAL_ROWS:
        lines.append(f"{name:<42}{'n/a':>12}{'n/a':>12}{'n/a':>10}")
    for name in order:
        if name in report.models:
            m = report.mean(name)
            assert m.rmse >= m.mae
            label = "Doubly Stochastic Variational Inference" if name == "DSVI" else name
            lines.append(f"{label:<42}{m.rmse:>12.3f}{m.mae:>12.3f}{m.r2:>10.3f}")
    lines.append("")
    lines.append("per fold:")
    for f in report.folds:
        for name in order:
            if name in f.metrics:
                m = f.metrics[name]
                lines.append(f"  fold {f.fold} {name:<10} rmse={m.rmse:.3f} mae={m.mae:.3f} "
                             f"r2={m.r2:.3f}")
        if f.coverage is not None:
            lines.append(f"  fold {f.fold} DSVI band coverage={f.coverage:.3f}")
    return "\n".join(lines) + "\n"


def cmd_cv(args, opts):
    dataset = dataio.load_csv(args.data)
    config = train_config(opts)
    baselines = BaselineConfig(idw_power=opts["idw-power"], knn_k=opts["knn-k"])
    report = cross_validate(dataset, config, k=opts["folds"],
                            features=_features(opts, args.data), baselines=baselines,
                            band_z=opts["band-z"])
    table = os.path.join(args.out, "cv_table.txt")
    js = os.path.join(args.out, "cv_report.json")
    atomic_write_text(js, dumps(report.to_dict()))
    atomic_write_text(table, format_table(report))
    write_manifest(args.out, "cv", opts, [table, js], args.data)
    print(format_table(report), end="")
    return 0


def _axis(value, default, cast):
    if value is None:
        return default
    if isinstance(value, (list, tuple)):
        return tuple(cast(v) for v in value)
    return tuple(cast(v) for v in str(value).split(","))


def cmd_gridsearch(args, opts):
    dataset = dataio.load_csv(args.data)
    defaults = GridSpec()
    grid = GridSpec(_axis(opts.get("grid-inducing"), defaults.inducing, int),
                    _axis(opts.get("grid-samples"), defaults.samples, int),
                    _axis(opts.get("grid-lr"), defaults.learning_rate, float))
    results = grid_search(dataset, grid, train_config(opts), k=opts["folds"],
                          features=_features(opts, args.data), workers=opts["workers"])
    k = opts["folds"]
    header = ["rank", "inducing", "samples", "learning_rate", "status"]
    for f in range(k):
        header += [f"fold{f}_rmse", f"fold{f}_mae", f"fold{f}_r2"]
    header += ["mean_rmse", "mean_mae", "mean_r2"]
    rows = []
    for rank, r in enumerate(results, 1):
        row = [rank if not r.failed else "", r.num_inducing, r.num_samples, r.learning_rate,
               "failed: " + r.error if r.failed else "ok"]
        if r.report is not None and len(r.report.folds) == k:
            for f in r.report.folds:
                m = f.metrics["DSVI"]
                row += [repr(m.rmse), repr(m.mae), repr(m.r2)]
            mean = r.report.mean()
            row += [repr(mean.rmse), repr(mean.mae), repr(mean.r2)]
        else:
            row += [""] * (3 * k + 3)
        rows.append(row)
    path = os.path.join(args.out, "grid.csv")
    _write_csv(path, header, rows)
    outputs = [path]
    if opts.get("grid-idw-power") or opts.get("grid-knn-k"):
        base = BaselineConfig(idw_power=opts["idw-power"], knn_k=opts["knn-k"])
        table = baseline_grid(dataset, _axis(opts.get("grid-idw-power"), (base.idw_power,), float),
                              _axis(opts.get("grid-knn-k"), (base.knn_k,), int), k=k,
                              seed=opts["seed"])
        outputs.append(os.path.join(args.out, "baseline_grid.csv"))
        _write_csv(outputs[-1], ["model", "parameter", "value", "mean_rmse", "mean_mae",
                                 "mean_r2"],
                   [[r["model"], r["parameter"], r["value"], repr(r["rmse"]), repr(r["mae"]),
                     repr(r["r2"])] for r in table])
    write_manifest(args.out, "gridsearch", opts, outputs, args.data)
    print(f"{len(results)} combinations written to {path}")
    return 0


def _parse_time(value):
    if value is None:
        return None
    try:
        return float(value)
    except ValueError:
        ts = pd.Timestamp(value)
        return (ts.tz_localize("UTC") if ts.tzinfo is None else ts).timestamp()


def query_rows(dataset, station=None, coords=None, start=None, end=None):
    """Rows to predict at: a known station's own rows, or synthetic rows at ``coords``
    that borrow meteorology from the nearest station reporting at each timestamp."""
    frame = dataset.frame
    t = frame["timestamp"]
    window = np.ones(len(frame), dtype=bool)
    if start is not None:
        window &= (t >= start).to_numpy()
    if end is not None:
        window &= (t <= end).to_numpy()
    if station is not None:
        if station not in dataset.stations:
            raise StationLookupError(
                f"unknown station {station!r}; known: {', '.join(dataset.station_ids)}")
        mask = window & (frame["station_id"] == station).to_numpy()
        return dataset.subset(mask), True
    lat, lon = coords
    sub = frame[window]
    ref = float(np.mean([c[0] for c in dataset.stations.values()]))
    q = planar_coordinates([lat], [lon], ref)[0]
    xy = planar_coordinates(sub["latitude"], sub["longitude"], ref)
    dist = np.sqrt(((xy - q) ** 2).sum(axis=1))
    nearest = pd.Series(dist, index=sub.index).groupby(sub["timestamp"]).idxmin()
    rows = frame.loc[nearest.to_numpy()].copy()
    rows["station_id"] = "query"
    rows["latitude"], rows["longitude"] = lat, lon
    rows = rows.reset_index(drop=True)
    return dataio.StationDataset(rows, {"query": (lat, lon)}, 0, 0, dataset.weather_categories), \
        False


def cmd_predict(args, opts):
    if not opts.get("checkpoint"):
        raise ParameterError("predict needs --checkpoint")
    ckpt = load_checkpoint(opts["checkpoint"])
    dataset = dataio.load_csv(args.data)
    station = opts.get("station")
    coords = None
    if opts.get("coords"):
        coords = tuple(float(v) for v in str(opts["coords"]).split(","))
        if len(coords) != 2:
            raise ParameterError("--coords needs LAT,LON")
    if station is None and coords is None:
        raise ParameterError("give --station or --coords")
    rows, has_truth = query_rows(dataset, station, coords, _parse_time(opts.get("start")),
                                 _parse_time(opts.get("end")))
    if len(rows) == 0:
        raise ParameterError("no rows in the requested time range")
    stats, names = ckpt.stats, ckpt.feature_names
    X = stats.apply(dataio.select_columns(dataio.design_matrix(rows, names), names, stats.names))
    samples = opts.get("predict-samples") or (ckpt.train_config or {}).get("predict_samples", 50)
    seed = opts["seed"]
    pred = ckpt.model.predict(X, num_samples=samples, rng=np.random.default_rng(seed))
    mean = stats.invert_target(pred.mean)
    sd = np.sqrt(stats.invert_variance(pred.variance))
    z = opts["band-z"]
    out_rows = []
    truth = rows.targets
    for i, ts in enumerate(rows.frame["timestamp"].to_numpy()):
        out_rows.append([repr(float(ts)), repr(float(mean[i])), repr(float(mean[i] - z * sd[i])),
                         repr(float(mean[i] + z * sd[i])),
                         repr(float(truth[i])) if has_truth else ""])
    path = os.path.join(args.out, "prediction.csv")
    _write_csv(path, ["timestamp", "mean", "lower", "upper", "ground_truth"], out_rows)
    write_manifest(args.out, "predict", opts, [path], args.data)
    print(f"{len(out_rows)} predictions written to {path}")
    return 0


def cmd_synth(args, opts):
    scales = _axis(opts["lengthscales"], None, float)
    dataset = dataio.generate_synthetic(opts["seed"], int(opts["stations"]), int(opts["times"]),
                                        variance=float(opts["variance"]), lengthscales=scales,
                                        noise=float(opts["noise"]))
    path = os.path.join(args.out, "synthetic.csv")
    os.makedirs(args.out, exist_ok=True)
    buf = io.StringIO()
    dataio.write_csv(dataset, buf)
    atomic_write_text(path, buf.getvalue())
    atomic_write_text(dataio.metadata_path(path), dumps(dataset.metadata))
    write_manifest(args.out, "synth", opts, [path, dataio.metadata_path(path)])
    print(f"{len(dataset)} rows written to {path}")
    return 0


COMMANDS = {"train": cmd_train, "cv": cmd_cv, "gridsearch": cmd_gridsearch,
            "predict": cmd_predict, "synth": cmd_synth}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    failed_marker = os.path.join(args.out, "FAILED")
    try:
        opts = resolve(args)
        os.makedirs(args.out, exist_ok=True)
        if os.path.exists(failed_marker):
            os.unlink(failed_marker)
        return COMMANDS[args.command](args, opts)
    except (AQDGPError, OSError) as exc:
        code = getattr(exc, "code", "io")
        message = " ".join(str(exc).split())
        print(f"aqdgp: error[{code}]: {message}", file=sys.stderr)
        try:
            os.makedirs(args.out, exist_ok=True)
            atomic_write_text(failed_marker, f"{code}: {message}\n")
        except OSError:
            pass
        return 1


if __name__ == "__main__":
    sys.exit(main())
