"""Pixel-aligned SDF field: hourglass encoder over the conditioning rasters and an MLP decoder.

Conditioning channels are stacked in the fixed order image(3), normal(3),
depth(1), mask(1); ``input_mode`` picks which of the first three groups are
present. The mask channel is always appended.
"""

from __future__ import annotations

import functools
import json
import logging
import math
import os

import numpy as np
import torch
import torch.nn as nn

from . import diffcore as dc
from .checkpoint import load_state, read_meta, save_module
from .geometry import Z_FAR, OrthoCamera
from .synthdata import AnalyticShape, surface_points

log = logging.getLogger(__name__)

INPUT_MODES = ("I", "N", "D", "IN", "ID", "ND", "IND")
SURFACE_SIGMA = 0.03
SURFACE_FRACTION = 15 / 16
LABEL_CLAMP = 0.1
LAMBDA_M = 1.0

DESK_FIELD = {"hourglass_width": 32, "feature_channels": 64, "stem_downsample": 1,
              "hourglass_depth": 3, "mlp": [128, 128, 64]}
FULL_FIELD = {"hourglass_width": 256, "feature_channels": 256, "stem_downsample": 2,
               "hourglass_depth": 4, "mlp": [512, 256, 128]}


def mode_channels(input_mode: str) -> int:
    check_mode(input_mode)
    return 3 * ("I" in input_mode) + 3 * ("N" in input_mode) + ("D" in input_mode) + 1


def check_mode(input_mode: str) -> str:
    if input_mode not in INPUT_MODES:
        raise ValueError(f"unknown input_mode {input_mode!r}; expected one of {INPUT_MODES}")
    return input_mode


def build_conditioning(input_mode: str, mask, image=None, normal=None, depth=None) -> np.ndarray:
    """(C, H, W) float32 raster stack for one sample; backgrounds are zeroed / set to z_far."""
    check_mode(input_mode)
    mask = np.asarray(mask, bool)
    # NormalMap / DepthMap objects are unwrapped to their rasters
    normal = getattr(normal, "normals", normal)
    depth = getattr(depth, "depth", depth)
    chans = []
    if "I" in input_mode:
        if image is None:
            raise ValueError("input mode needs an image")
        chans.extend(np.moveaxis(np.asarray(image) * mask[..., None], -1, 0))
    if "N" in input_mode:
        if normal is None:
            raise ValueError("input mode needs a normal map")
        chans.extend(np.moveaxis(np.asarray(normal) * mask[..., None], -1, 0))
    if "D" in input_mode:
        if depth is None:
            raise ValueError("input mode needs a depth map")
        chans.append(np.where(mask, depth, Z_FAR))
    chans.append(mask.astype(np.float64))
    return np.stack(chans).astype(np.float32)


def conditioning_from_sample(sample, input_mode: str, normal=None, depth=None) -> np.ndarray:
    """Conditioning for a dataset sample; ``normal``/``depth`` override the ground-truth rasters."""
    nm = sample.normal if normal is None else normal
    dm = sample.depth if depth is None else depth
    return build_conditioning(input_mode, dm.mask, sample.image, nm, dm)


class Block(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv = dc.Conv3x3(c_in, c_out, stride)
        self.norm = dc.GroupNorm(dc.num_groups(c_out), c_out)

    def forward(self, x):
        return dc.relu(self.norm(self.conv(x)))


class Hourglass(nn.Module):
    def __init__(self, width: int, depth: int):
        super().__init__()
        self.skip = Block(width, width)
        self.down = Block(width, width)
        self.inner = Hourglass(width, depth - 1) if depth > 1 else Block(width, width)
        self.out = Block(width, width)

    def forward(self, x):
        low = self.out(self.inner(self.down(dc.avg_pool2(x))))
        return self.skip(x) + dc.upsample(low, 2)


class HourglassEncoder(nn.Module):
    def __init__(self, c_in: int, width: int, c_out: int, stem_downsample: int = 1, depth: int = 3):
        super().__init__()
        stem = [Block(c_in, width, stride=2)]
        stem += [Block(width, width, stride=2) for _ in range(stem_downsample - 1)]
        self.stem = nn.Sequential(*stem)
        self.hourglass = Hourglass(width, depth)
        self.head = dc.Conv1x1(width, c_out)
        self.stride = 2**stem_downsample
        self.period = 2 ** (stem_downsample + depth)

    def forward(self, x):
        if x.shape[-1] % self.period or x.shape[-2] % self.period:
            raise dc.ShapeError(f"input size must be divisible by {self.period}")
        return self.head(self.hourglass(self.stem(x)))


class SdfDecoder(nn.Module):
    """MLP over (feature ++ z) with the input re-injected before layers 2 and 3."""

    def __init__(self, c_in: int, hidden=(128, 128, 64)):
        super().__init__()
        h1, h2, h3 = hidden
        self.l1 = dc.Dense(c_in, h1)
        self.l2 = dc.Dense(h1 + c_in, h2)
        self.l3 = dc.Dense(h2 + c_in, h3)
        self.l4 = dc.Dense(h3, 1)

    def forward(self, x):
        h = dc.relu(self.l1(x))
        h = dc.relu(self.l2(dc.concat([h, x], -1)))
        h = dc.relu(self.l3(dc.concat([h, x], -1)))
        return self.l4(h)[..., 0]


class ImplicitField(nn.Module):
    def __init__(self, input_mode: str = "D", hourglass_width: int = 32, feature_channels: int = 64,
                 stem_downsample: int = 1, hourglass_depth: int = 3, mlp=(128, 128, 64),
                 half_extent: float = 1.0):
        super().__init__()
        self.input_mode = check_mode(input_mode)
        self.config = {"input_mode": input_mode, "hourglass_width": hourglass_width,
                       "feature_channels": feature_channels, "stem_downsample": stem_downsample,
                       "hourglass_depth": hourglass_depth, "mlp": list(mlp), "half_extent": half_extent}
        self.in_channels = mode_channels(input_mode)
        self.encoder = HourglassEncoder(self.in_channels, hourglass_width, feature_channels,
                                        stem_downsample, hourglass_depth)
        self.decoder = SdfDecoder(feature_channels + 1, mlp)
        self.half_extent = half_extent

    @property
    def decoder_input_width(self) -> int:
        return self.decoder.l1.weight.shape[1]

    def encode(self, cond) -> torch.Tensor:
        cond = torch.as_tensor(cond)
        if cond.ndim == 3:
            cond = cond[None]
        if cond.shape[1] != self.in_channels:
            raise dc.ShapeError(f"input mode {self.input_mode} expects {self.in_channels} channels, "
                                f"got {cond.shape[1]}")
        return self.encoder(cond.to(self.decoder.l1.weight.dtype))

    def query(self, features: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
        """SDF at ``points`` (B,N,3) given encoded ``features`` (B,C,h,w); returns (B,N)."""
        if features is None:
            raise ValueError("conditioning has not been encoded")
        points = points.to(features.dtype)
        grid = torch.stack([points[..., 0] / self.half_extent, -points[..., 1] / self.half_extent], -1)
        feat = dc.grid_sample_bilinear(features, grid).transpose(1, 2)
        return self.decoder(dc.concat([feat, points[..., 2:3]], -1))

    def forward(self, cond, points):
        return self.query(self.encode(cond), points)


def make_field(input_mode: str, config: dict | None = None) -> ImplicitField:
    cfg = dict(DESK_FIELD)
    cfg.update({k: v for k, v in (config or {}).items() if k in DESK_FIELD or k == "half_extent"})
    return ImplicitField(input_mode, **cfg)


def encode(field: ImplicitField, cond) -> torch.Tensor:
    return field.encode(cond)


def sample_feature(fm: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinear feature lookup at continuous feature-pixel coords ``uv`` (B,N,2).

    Node (i, j) sits at integer coordinates; lookups outside the raster clamp
    to the border. Returns (B,N,C).
    """
    h, w = fm.shape[-2:]
    grid = torch.stack([2 * (uv[..., 0] + 0.5) / w - 1, 2 * (uv[..., 1] + 0.5) / h - 1], -1)
    return dc.grid_sample_bilinear(fm, grid.to(fm.dtype)).transpose(1, 2)


def eval_sdf(field: ImplicitField, cond, points, features=None, chunk: int = 65536) -> np.ndarray:
    """SDF values for an (N,3) array of points under one conditioning raster stack."""
    pts = torch.as_tensor(np.asarray(points), dtype=field.decoder.l1.weight.dtype)
    out = []
    with torch.no_grad():
        fm = field.encode(cond) if features is None else features
        for s in range(0, len(pts), chunk):
            out.append(field.query(fm, pts[None, s:s + chunk])[0])
    return torch.cat(out).numpy() if out else np.zeros(0, np.float32)


# ---------------------------------------------------------------------------
# supervision


@functools.lru_cache(maxsize=512)
def _surface_pool(key: str, n: int, seed: int) -> np.ndarray:
    shape = AnalyticShape.from_dict(json.loads(key))
    return surface_points(shape, n, np.random.default_rng(seed))


def surface_pool(shape: AnalyticShape, n: int = 20000, seed: int = 0) -> np.ndarray:
    return _surface_pool(shape.params_key(), n, seed)


class SdfSampleBatch:
    def __init__(self, points, labels, sign_valid=None):
        self.points = np.asarray(points, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64)
        self.sign_valid = (np.ones(len(self.labels), bool) if sign_valid is None
                           else np.asarray(sign_valid, bool))

    def __len__(self) -> int:
        return len(self.labels)


def sample_supervised_batch(shape: AnalyticShape, n: int, seed, pool: np.ndarray | None = None,
                            sigma: float = SURFACE_SIGMA, fraction: float = SURFACE_FRACTION) -> SdfSampleBatch:
    """Near-surface Gaussian samples plus uniform samples in [-1,1]^3, labelled by the analytic SDF."""
    if n < 2:
        raise ValueError("need at least two samples")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_surf = math.ceil(fraction * n)
    if pool is None:
        pool = surface_points(shape, n_surf, rng)
    base = pool[rng.integers(len(pool), size=n_surf)]
    near = base + rng.normal(scale=sigma, size=base.shape)
    uni = rng.uniform(-1.0, 1.0, size=(n - n_surf, 3))
    pts = np.clip(np.concatenate([near, uni]), -1.0, 1.0)
    return SdfSampleBatch(pts, shape.sdf(pts))


def supervised_loss(pred, labels, sign_valid=None, lambda_m: float = LAMBDA_M, clamp: float = LABEL_CLAMP):
    """L1 regression on clamped labels plus an extra L1 penalty where the signs disagree."""
    if clamp is not None:
        labels = torch.clamp(labels, -clamp, clamp)
    err = torch.abs(pred - labels)
    wrong = (pred * labels < 0).to(err.dtype)
    if sign_valid is not None:
        wrong = wrong * sign_valid.to(err.dtype)
    return err.mean() + lambda_m * (err * wrong).mean()


# ---------------------------------------------------------------------------
# probes


def field_iou(field: ImplicitField, cond, shape: AnalyticShape, n: int = 10000, seed: int = 0,
              sampler: str = "near_surface", features=None) -> float:
    """IoU between the learned field and an analytic shape over a seeded point set."""
    rng = np.random.default_rng(seed)
    if sampler == "near_surface":
        pool = surface_pool(shape)
        pts = pool[rng.integers(len(pool), size=n)] + rng.normal(scale=SURFACE_SIGMA, size=(n, 3))
    else:
        pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    pred_in = eval_sdf(field, cond, pts, features) < 0
    gt_in = shape.sdf(pts) < 0
    union = np.logical_or(pred_in, gt_in).sum()
    if union == 0:
        raise ValueError("IoU undefined: both point sets empty")
    return float(np.logical_and(pred_in, gt_in).sum() / union)


# ---------------------------------------------------------------------------
# training


class ConditionedSet:
    """Conditioning rasters and analytic shapes for a dataset, built once."""

    def __init__(self, dataset, input_mode: str, rasters=None):
        self.input_mode = check_mode(input_mode)
        self.shapes = []
        conds = []
        for i, s in enumerate(dataset):
            nm, dm = rasters[i] if rasters is not None else (None, None)
            conds.append(conditioning_from_sample(s, input_mode, nm, dm))
            self.shapes.append(s.shape)
        self.cond = torch.from_numpy(np.stack(conds))
        self.camera: OrthoCamera = dataset.camera
        self.samples = list(dataset)

    def __len__(self) -> int:
        return len(self.shapes)


def mean_iou(field, cset: ConditionedSet, n: int = 10000, seed: int = 0, sampler: str = "near_surface") -> float:
    vals = [field_iou(field, cset.cond[i], cset.shapes[i], n, seed + i, sampler) for i in range(len(cset))]
    return float(np.mean(vals))


def _point_batch(cset: ConditionedSet, idx, n_points, rng):
    pts, lab = [], []
    for i in idx:
        b = sample_supervised_batch(cset.shapes[i], n_points, rng, pool=surface_pool(cset.shapes[i]))
        pts.append(b.points)
        lab.append(b.labels)
    return (torch.from_numpy(np.stack(pts).astype(np.float32)),
            torch.from_numpy(np.stack(lab).astype(np.float32)))


PIFU_TRAIN_DEFAULTS = {"epochs": 60, "lr": 1e-3, "lr_drop": 0.75, "batch_size": 4, "n_points": 4000,
                       "seed": 0, "lambda_m": LAMBDA_M, "probe_points": 4000, "probe_every": 10}


def train_pifu_supervised(train_set: ConditionedSet, input_mode: str, config: dict | None = None,
                          test_set: ConditionedSet | None = None, out_dir=None, log_fn=None,
                          field: ImplicitField | None = None) -> dict:
    """Fully supervised SDF regression on analytic ground truth; logs losses and IoU probes."""
    check_mode(input_mode)
    cfg = dict(PIFU_TRAIN_DEFAULTS)
    cfg.update(config or {})
    log_fn = log_fn or (lambda rec: log.info("%s", rec))
    torch.manual_seed(cfg["seed"])
    if field is None:
        field = make_field(input_mode, cfg.get("field"))
    if field.input_mode != input_mode:
        raise ValueError("field input mode does not match")
    rng = np.random.default_rng([cfg["seed"], 1])
    ctx = dc.GradContext(
        lambda cond, points, labels: supervised_loss(field(cond, points), labels, lambda_m=cfg["lambda_m"]),
        dict(field.named_parameters()))
    opt = dc.Adam(cfg["lr"])
    n = len(train_set)
    curve, history = [], []
    for epoch in range(cfg["epochs"]):
        # one tenfold learning-rate drop for the tail of the run
        if cfg["lr_drop"] and epoch >= cfg["lr_drop"] * cfg["epochs"]:
            opt.lr = cfg["lr"] * 0.1
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg["batch_size"]):
            idx = order[start:start + cfg["batch_size"]]
            pts, lab = _point_batch(train_set, idx, cfg["n_points"], rng)
            loss = ctx.forward(cond=train_set.cond[idx], points=pts, labels=lab)
            opt.step(ctx.params, ctx.gradient(loss))
            total += loss.item() * len(idx)
        curve.append(total / n)
        rec = {"stage": "pifu", "input_mode": input_mode, "epoch": epoch + 1, "loss": curve[-1]}
        last = epoch + 1 == cfg["epochs"]
        if cfg["probe_every"] and ((epoch + 1) % cfg["probe_every"] == 0 or last):
            rec["train_iou"] = mean_iou(field, train_set, cfg["probe_points"], seed=1000)
            if test_set is not None:
                rec["test_iou"] = mean_iou(field, test_set, cfg["probe_points"], seed=2000)
        history.append(rec)
        log_fn(rec)
    if out_dir:
        save_field(field, out_dir, {"train": cfg, "curve": curve})
    return {"field": field, "curve": curve, "history": history}


def save_field(field: ImplicitField, out_dir, extra: dict | None = None) -> str:
    return save_module(field, out_dir, "implicit_field", field.config,
                       {"input_mode": field.input_mode, **(extra or {})})


def load_field(ckpt_dir) -> ImplicitField:
    meta = read_meta(ckpt_dir)
    if meta.get("kind") != "implicit_field":
        raise ValueError(f"{ckpt_dir} is not an implicit-field checkpoint")
    cfg = dict(meta["config"])
    mode = cfg.pop("input_mode")
    return load_state(ImplicitField(mode, **cfg), ckpt_dir, meta).eval()


def ckpt_exists(path) -> bool:
    return os.path.exists(os.path.join(path, "model.json"))
