"""Versioned JSON checkpoints.

Floats are written with Python's shortest round-tripping repr, so loading
restores every parameter bit for bit. Keys are sorted, making the file bytes
a deterministic function of its contents.
"""

import json
import os
import tempfile

import numpy as np

from .data import NormalizationStats
from .errors import CheckpointError
from .model import DGPModel

FORMAT = "aqdgp-checkpoint"
VERSION = 1


def atomic_write_text(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(obj):
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True)


def checkpoint_dict(model, stats=None, feature_names=None, train_config=None,
                    trainer_state=None, extra=None):
    return {
        "format": FORMAT,
        "version": VERSION,
        "model": model.config(),
        "parameters": {name: {"shape": list(v.shape), "values": v.reshape(-1).tolist()}
                       for name, v in model.snapshot().items()},
        "normalization": stats.to_dict() if stats is not None else None,
        "feature_names": list(feature_names) if feature_names is not None else None,
        "train_config": train_config,
        "trainer_state": trainer_state,
        "extra": extra or {},
    }


def save_checkpoint(path, model, **kwargs):
    atomic_write_text(path, dumps(checkpoint_dict(model, **kwargs)))


class Checkpoint:
    def __init__(self, payload):
        self.payload = payload
        values = {name: np.array(p["values"], dtype=np.float64).reshape(p["shape"])
                  for name, p in payload["parameters"].items()}
        self.model = DGPModel.from_config(payload["model"], values)
        norm = payload.get("normalization")
        self.stats = NormalizationStats.from_dict(norm) if norm else None
        self.feature_names = payload.get("feature_names")
        self.train_config = payload.get("train_config")
        self.trainer_state = payload.get("trainer_state")
        self.extra = payload.get("extra", {})


def load_checkpoint(path):
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    return Checkpoint(payload)
