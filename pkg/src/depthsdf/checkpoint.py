"""Checkpoints: ``model.json`` (architecture + parameter manifest) and one NTF1 blob per tensor."""

from __future__ import annotations

import json
import os

import numpy as np
import torch
import torch.nn as nn

from .diffcore import read_ntf, write_ntf
from .geometry import ensure_dir


def save_module(module: nn.Module, out_dir, kind: str, config: dict, extra: dict | None = None) -> str:
    ensure_dir(out_dir)
    entries = []
    for name, t in module.state_dict().items():
        fname = f"{name}.ntf"
        write_ntf(os.path.join(out_dir, fname), t.detach().cpu().numpy().astype(np.float32))
        entries.append({"name": name, "file": fname, "shape": list(t.shape)})
    meta = {"kind": kind, "config": config, "parameters": entries}
    if extra:
        meta.update(extra)
    with open(os.path.join(out_dir, "model.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return str(out_dir)


def read_meta(ckpt_dir) -> dict:
    path = os.path.join(ckpt_dir, "model.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no checkpoint at {ckpt_dir}")
    with open(path) as fh:
        return json.load(fh)


def load_state(module: nn.Module, ckpt_dir, meta: dict | None = None) -> nn.Module:
    meta = meta or read_meta(ckpt_dir)
    ref = module.state_dict()
    state = {}
    for e in meta["parameters"]:
        arr = read_ntf(os.path.join(ckpt_dir, e["file"]))
        state[e["name"]] = torch.from_numpy(arr.copy()).to(ref[e["name"]].dtype)
    module.load_state_dict(state)
    return module
