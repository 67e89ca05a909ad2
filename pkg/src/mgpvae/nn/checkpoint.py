"""Versioned JSON checkpoints.

Floats are written with ``repr`` precision so a save/load round trip is
bit-exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .optim import AdamState
from .params import ParamLayout, Params

FORMAT = "mgpvae-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    params: Params
    optimizer: AdamState | None = None
    config: dict = field(default_factory=dict)
    epoch: int = 0
    extra: dict = field(default_factory=dict)


def _floats(a: np.ndarray) -> list:
    return [float(x) for x in np.asarray(a, dtype=np.float64).ravel()]


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "layout": ckpt.params.layout.to_json(),
        "params": _floats(ckpt.params.vector),
        "optimizer": None if ckpt.optimizer is None else {
            "step": ckpt.optimizer.step,
            "m": _floats(ckpt.optimizer.m),
            "v": _floats(ckpt.optimizer.v),
        },
        "extra": ckpt.extra,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        json.dump(doc, f, allow_nan=False)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != FORMAT:
        raise ConfigError(f"{path}: not a checkpoint file")
    if doc.get("version") != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    layout = ParamLayout.from_json(doc["layout"])
    params = Params(np.array(doc["params"], dtype=np.float64), layout)
    opt = doc.get("optimizer")
    state = None
    if opt is not None:
        state = AdamState(np.array(opt["m"], dtype=np.float64), np.array(opt["v"], dtype=np.float64),
                          int(opt["step"]))
    return Checkpoint(params, state, doc.get("config", {}), int(doc.get("epoch", 0)), doc.get("extra", {}))
