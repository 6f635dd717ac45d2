"""Run configuration, seed sub-streams and run manifests."""

from __future__ import annotations

import copy
import datetime
import hashlib
import json
import os
import subprocess
import zlib

import numpy as np

from . import __version__
from .pifu import DESK_FIELD

DEFAULTS: dict = {
    "seed": 0,
    "threads": 1,
    "data": {"resolution": 128, "half_extent": 1.0,
             "counts": {"train": 64, "test": 16, "wild": 32, "wild_test": 16}},
    "estimators": {"width": 16, "epochs": 40, "lr": 1e-3, "lr_drop": 0.75, "batch_size": 4, "augment": "mirror"},
    "pifu": {"input_mode": "D", "epochs": 30, "lr": 1e-3, "lr_drop": 0.75, "batch_size": 4,
             "n_points": 4000, "probe_every": 10, "probe_points": 4000, "lambda_m": 1.0,
             "conditioning": "gt", "field": dict(DESK_FIELD)},
    "finetune": {"lambda_surf": 0.618, "lambda_m": 1.0, "sigma": 0.015, "w_vol": 1.0, "w_sup": 1.0,
                 "pixel_budget": 2048, "n_per_pixel": 3, "render_pixels": 512, "lr": 1e-4,
                 "batch_size": 2, "sup_batch_size": 2, "sup_points": 4000, "epochs": 10,
                 "probe_every": 0, "probe_points": 4000, "depth_source": "estimated",
                 "march": {"max_steps": 64, "hit_eps": 1e-3, "step_scale": 0.8, "z_start": 1.0, "z_end": -1.0}},
    "ablation": {"modes": ["I", "N", "D", "IN", "ID", "ND", "IND"], "probe_points": 4000},
    "reconstruct": {"resolution": 128},
    "eval": {"sampler": "uniform", "n": 200000, "n_surface": 10000, "gt_mesh_resolution": 128},
}


def merge(base: dict, override: dict | None) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = DEFAULTS
    if path:
        with open(path) as fh:
            cfg = merge(cfg, json.load(fh))
    return merge(cfg, overrides)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def substream_seed(root: int, name: str) -> int:
    """Deterministic 31-bit seed for the named sub-stream of ``root``."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


def seeds_for(root: int) -> dict:
    names = ("dataset", "sampler", "init", "training", "finetune", "eval")
    return {n: substream_seed(root, n) for n in names}


def version_string() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                              capture_output=True, text=True, timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out_dir, command: str, cfg: dict, extra: dict | None = None,
                   name: str = "run_manifest.json") -> str:
    os.makedirs(out_dir, exist_ok=True)
    rec = {"command": command, "config": cfg, "config_hash": config_hash(cfg),
           "seeds": seeds_for(cfg.get("seed", 0)), "version": version_string(),
           "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat()}
    if extra:
        rec.update(extra)
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        json.dump(rec, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


class MetricsLog:
    """Line-delimited JSON log."""

    def __init__(self, path):
        self.path = path
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        open(path, "w").close()

    def __call__(self, rec: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
