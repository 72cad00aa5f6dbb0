"""Self-describing JSON checkpoints.

Layout (keys sorted, so files are byte-stable)::

    {"version": 1, "kind": "udg" | "erm", "config": {...}, "model": {...},
     "iteration": n, "rng": {"seed": s, "counter": n},
     "params": [{"name", "shape", "data"}], "optimizer": [...]}

``data`` is base64 of the little-endian float64 bytes, which round-trips every
value bit for bit.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .config import ConfigError, TrainConfig
from .model import Backbone, MixupNet, PerturbNet, UDGModel
from .optim import make_optimizer

VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    model: dict
    params: dict[str, np.ndarray]
    iteration: int = 0
    rng: dict = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    kind: str = "udg"
    version: int = VERSION


def _encode(name: str, arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"name": name, "shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode(rec: dict) -> tuple[str, np.ndarray]:
    try:
        name, shape, data = rec["name"], [int(s) for s in rec["shape"]], rec["data"]
        raw = base64.b64decode(data.encode("ascii"), validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed parameter record: {exc}") from None
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) != 8 * count:
        raise CheckpointError(f"parameter {name!r}: shape {shape} needs {count} values, found {len(raw) / 8:g}")
    return name, np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def dumps(ckpt: Checkpoint) -> str:
    doc = {
        "version": ckpt.version,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "model": ckpt.model,
        "iteration": ckpt.iteration,
        "rng": ckpt.rng,
        "params": [_encode(k, v) for k, v in ckpt.params.items()],
        "optimizer": [_encode(k, v) for k, v in sorted(ckpt.optimizer.items())],
    }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def loads(text: str) -> Checkpoint:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupted checkpoint: {exc}") from None
    if not isinstance(doc, dict):
        raise CheckpointError("corrupted checkpoint: top level is not an object")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r} (expected {VERSION})")
    try:
        params = dict(_decode(r) for r in doc["params"])
        optimizer = dict(_decode(r) for r in doc.get("optimizer", []))
        return Checkpoint(
            doc["config"], doc["model"], params, int(doc["iteration"]), doc.get("rng", {}), optimizer, doc.get("kind", "udg")
        )
    except KeyError as exc:
        raise CheckpointError(f"corrupted checkpoint: missing {exc}") from None


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps(ckpt), encoding="utf-8")
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: not a text checkpoint") from None
    return loads(text)


# --------------------------------------------------------------- conversions


def model_to_checkpoint(model: UDGModel, cfg: TrainConfig, iteration: int = 0, optimizer=None, kind: str = "udg") -> Checkpoint:
    return Checkpoint(
        config=cfg.to_dict(),
        model={
            "sizes": list(model.backbone.sizes),
            "perturb_layers": list(model.backbone.perturb_layers),
            "aux_hidden": model.mnet.params[0].shape[1],
            "floor": model.pnet.floor,
        },
        params={name: p.data for name, p in model.named_parameters()},
        iteration=iteration,
        rng={"seed": cfg.seed, "counter": iteration},
        optimizer=optimizer.state_dict() if optimizer is not None else {},
        kind=kind,
    )


def state_to_checkpoint(state) -> Checkpoint:
    return model_to_checkpoint(state.model, state.config, state.iteration, state.optimizer, state.kind)


def model_from_checkpoint(ckpt: Checkpoint) -> UDGModel:
    m = ckpt.model
    try:
        sizes = tuple(m["sizes"])
        layers = tuple(m["perturb_layers"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint model section lacks {exc}") from None
    p = ckpt.params

    def take(name):
        if name not in p:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        return ag.parameter(p[name])

    theta = []
    for l in range(len(sizes) - 1):
        theta += [take(f"theta.{l}.weight"), take(f"theta.{l}.bias")]
    try:
        backbone = Backbone(sizes, theta, layers)
    except (ValueError, ag.ShapeError) as exc:
        raise CheckpointError(f"inconsistent backbone: {exc}") from None
    floor = float(m.get("floor", 1e-6))
    widths = {l: backbone.width(l) for l in layers}
    pnet = PerturbNet(widths, {l: [take(f"phi_p.{l}.{i}") for i in range(4)] for l in layers}, floor)
    mnet = MixupNet(backbone.width(layers[0]), [take(f"phi_m.{i}") for i in range(4)], floor)
    return UDGModel(backbone, pnet, mnet)


def state_from_checkpoint(ckpt: Checkpoint):
    from .meta import TrainState

    try:
        cfg = TrainConfig.from_dict({k: (tuple(v) if isinstance(v, list) else v) for k, v in ckpt.config.items()})
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"checkpoint config invalid: {exc}") from None
    optimizer = make_optimizer(cfg.optimizer, cfg.outer_lr)
    optimizer.load_state_dict(ckpt.optimizer)
    return TrainState(model_from_checkpoint(ckpt), optimizer, cfg, ckpt.iteration, ckpt.kind)
