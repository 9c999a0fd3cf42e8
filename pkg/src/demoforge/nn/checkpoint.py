"""``demoforge-ckpt-v1`` checkpoints: descriptor, parameters, optimizer and RNG state.

Stored as an uncompressed ``.npz``; float64 arrays round-trip bit-exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import MissingCheckpoint, SchemaMismatch
from .optim import AdamWState

CKPT_SCHEMA = "demoforge-ckpt-v1"


@dataclass
class Checkpoint:
    descriptor: dict
    params: dict[str, np.ndarray]
    optimizer: AdamWState | None = None
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    meta = {
        "schema": CKPT_SCHEMA,
        "descriptor": ckpt.descriptor,
        "param_names": list(ckpt.params),
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "optimizer": None,
    }
    if ckpt.optimizer is not None:
        meta["optimizer"] = ckpt.optimizer.hyper()
        for k, v in ckpt.optimizer.m.items():
            arrays[f"opt_m/{k}"] = v
        for k, v in ckpt.optimizer.v.items():
            arrays[f"opt_v/{k}"] = v
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    tmp = path.with_name(path.name + ".tmp.npz")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(str(path))
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("schema") != CKPT_SCHEMA:
            raise SchemaMismatch(f"{path}: expected {CKPT_SCHEMA}, got {meta.get('schema')!r}")
        params = {k: z[f"param/{k}"].copy() for k in meta["param_names"]}
        opt = None
        if meta["optimizer"] is not None:
            h = meta["optimizer"]
            opt = AdamWState(lr=h["lr"], betas=tuple(h["betas"]), eps=h["eps"],
                             weight_decay=h["weight_decay"], step=h["step"])
            for key in z.files:
                if key.startswith("opt_m/"):
                    opt.m[key[6:]] = z[key].copy()
                elif key.startswith("opt_v/"):
                    opt.v[key[6:]] = z[key].copy()
    return Checkpoint(meta["descriptor"], params, opt, meta["rng_state"], meta["extra"])
