"""Depth-guided self-supervision of a pretrained implicit field.

Volume term: points offset along the view ray from back-projected depth
pixels carry the signed offset as a pseudo SDF label. Surface term: the
field's rendered depth is pulled toward the estimated depth map.
"""

from __future__ import annotations

import logging
import numpy as np
import torch

from . import diffcore as dc
from .geometry import DepthMap, back_project
from .pifu import (ConditionedSet, ImplicitField, SdfSampleBatch, _point_batch, mean_iou,
                   save_field, supervised_loss)
from .render import RayMarchConfig, field_sdf_fn, pixel_rays, render_rays

log = logging.getLogger(__name__)

LAMBDA_SURF = 0.618
SIGMA = 0.015
LAMBDA_M = 1.0

FINETUNE_DEFAULTS = {
    "lambda_surf": LAMBDA_SURF, "lambda_m": LAMBDA_M, "sigma": SIGMA, "w_vol": 1.0, "w_sup": 1.0,
    "pixel_budget": 2048, "n_per_pixel": 3, "render_pixels": 512, "lr": 1e-4, "batch_size": 2,
    "sup_batch_size": 2, "sup_points": 4000, "epochs": 10, "seed": 0, "probe_points": 4000,
    "probe_every": 0, "march": {},
}


class VolumePseudoBatch(SdfSampleBatch):
    def __init__(self, points, labels, sign_valid=None, source_id: str = "", sigma: float = SIGMA):
        super().__init__(points, labels, sign_valid)
        self.source_id = source_id
        self.sigma = sigma


def sample_volume_pseudo(dm: DepthMap, n_per_pixel: int = 3, pixel_budget: int = 2048,
                         sigma: float = SIGMA, seed=0, source_id: str = "") -> VolumePseudoBatch:
    """Surface points (label 0) plus ``n_per_pixel`` ray offsets t per chosen pixel (label t).

    Offsets toward the camera (+z) are positive. Pixels are drawn without
    replacement when the foreground has at least ``pixel_budget`` of them.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    surf = back_project(dm).points
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pick = rng.choice(len(surf), size=pixel_budget, replace=len(surf) < pixel_budget)
    p0 = surf[pick]
    t = rng.uniform(-sigma, sigma, size=(pixel_budget, n_per_pixel))
    while np.any(t == 0):
        t[t == 0] = rng.uniform(-sigma, sigma, size=int((t == 0).sum()))
    offs = np.repeat(p0[:, None, :], n_per_pixel, 1)
    offs[..., 2] += t
    pts = np.concatenate([p0[:, None, :], offs], 1).reshape(-1, 3)
    labels = np.concatenate([np.zeros((pixel_budget, 1)), t], 1).reshape(-1)
    return VolumePseudoBatch(pts, labels, None, source_id, sigma)


def volume_loss(pred, labels, sign_valid=None, lambda_m: float = LAMBDA_M):
    return supervised_loss(pred, labels, sign_valid, lambda_m=lambda_m, clamp=None)


def loss_volume(preds, batch: SdfSampleBatch, lambda_m: float = LAMBDA_M) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    if preds.shape != batch.labels.shape:
        raise ValueError("predictions and labels differ in length")
    return float(volume_loss(torch.from_numpy(preds), torch.from_numpy(batch.labels),
                             torch.from_numpy(batch.sign_valid), lambda_m))


def surface_loss(rendered, estimated, valid):
    m = valid.to(rendered.dtype)
    count = m.sum()
    if count == 0:
        raise ValueError("no pixel is valid in both depth maps")
    return (((rendered - estimated) ** 2) * m).sum() / count


def loss_surface(rendered: DepthMap, estimated: DepthMap, converged=None) -> float:
    if (rendered.camera.width, rendered.camera.height) != (estimated.camera.width, estimated.camera.height):
        raise ValueError("depth maps use different cameras")
    conv = rendered.mask if converged is None else np.asarray(converged, bool)
    valid = conv & estimated.mask
    return float(surface_loss(torch.from_numpy(rendered.depth.astype(np.float64)),
                              torch.from_numpy(estimated.depth.astype(np.float64)),
                              torch.from_numpy(valid)))


def _wild_terms(field: ImplicitField, cond, dm: DepthMap, cfg: dict, rng, march_cfg: RayMarchConfig):
    """Volume and surface losses for one wild sample (both tensors with grad)."""
    fm = field.encode(cond)
    zero = fm.sum() * 0.0
    l_vol = zero
    if cfg["w_vol"]:
        vb = sample_volume_pseudo(dm, cfg["n_per_pixel"], cfg["pixel_budget"], cfg["sigma"], rng)
        pts = torch.as_tensor(vb.points[None], dtype=fm.dtype)
        pred = field.query(fm, pts)[0]
        l_vol = volume_loss(pred, torch.as_tensor(vb.labels, dtype=fm.dtype),
                            torch.from_numpy(vb.sign_valid), cfg["lambda_m"])
    l_surf = zero
    if cfg["lambda_surf"]:
        v, u = np.nonzero(dm.mask)
        pick = rng.choice(len(u), size=min(cfg["render_pixels"], len(u)), replace=False)
        pix = np.stack([u[pick], v[pick]], 1)
        xy = pixel_rays(dm.camera, pix, fm.dtype)
        d_r, hit = render_rays(field_sdf_fn(field, fm), xy, march_cfg)
        est = torch.as_tensor(dm.depth[pix[:, 1], pix[:, 0]], dtype=fm.dtype)
        if hit.any():
            l_surf = surface_loss(d_r, est, hit)
    return l_vol, l_surf


def finetune_self(field: ImplicitField, wild: ConditionedSet, wild_depth: list, config: dict | None = None,
                  synthetic: ConditionedSet | None = None, out_dir=None, log_fn=None,
                  probe_set: ConditionedSet | None = None) -> dict:
    """Optimize ``w_vol * L_vol + lambda_surf * L_surf`` on wild depth maps.

    ``wild_depth[i]`` is the DepthMap behind ``wild.cond[i]`` (estimated, or
    ground truth in oracle mode). When ``synthetic`` is given, one supervised
    batch is mixed in per wild batch with weight ``w_sup``. The field is
    updated in place.
    """
    if len(wild) == 0:
        raise ValueError("empty wild set")
    cfg = dict(FINETUNE_DEFAULTS)
    cfg.update(config or {})
    march_cfg = RayMarchConfig(**cfg["march"])
    log_fn = log_fn or (lambda rec: log.info("%s", rec))
    torch.manual_seed(cfg["seed"])
    rng = np.random.default_rng([cfg["seed"], 2])
    opt = dc.Adam(cfg["lr"])

    def objective(idx, sup_idx):
        l_vol = l_surf = 0.0
        for i in idx:
            v, s = _wild_terms(field, wild.cond[i], wild_depth[i], cfg, rng, march_cfg)
            l_vol = l_vol + v / len(idx)
            l_surf = l_surf + s / len(idx)
        total = cfg["w_vol"] * l_vol + cfg["lambda_surf"] * l_surf
        l_sup = torch.zeros(())
        if synthetic is not None and cfg["w_sup"]:
            pts, lab = _point_batch(synthetic, sup_idx, cfg["sup_points"], rng)
            l_sup = supervised_loss(field(synthetic.cond[sup_idx], pts), lab, lambda_m=cfg["lambda_m"])
            total = total + cfg["w_sup"] * l_sup
        terms["vol"], terms["surf"], terms["sup"] = (float(torch.as_tensor(t).detach()) for t in (l_vol, l_surf, l_sup))
        return total

    terms: dict = {}
    ctx = dc.GradContext(objective, dict(field.named_parameters()))
    history = []
    n = len(wild)
    for epoch in range(cfg["epochs"]):
        order = rng.permutation(n)
        sums = {"loss": 0.0, "vol": 0.0, "surf": 0.0, "sup": 0.0}
        steps = 0
        for start in range(0, n, cfg["batch_size"]):
            idx = order[start:start + cfg["batch_size"]]
            sup_idx = (rng.choice(len(synthetic), size=cfg["sup_batch_size"], replace=False)
                       if synthetic is not None else None)
            loss = ctx.forward(idx=idx, sup_idx=sup_idx)
            opt.step(ctx.params, ctx.gradient(loss))
            sums["loss"] += loss.item()
            for k in ("vol", "surf", "sup"):
                sums[k] += terms[k]
            steps += 1
        rec = {"stage": "finetune", "epoch": epoch + 1, **{k: v / steps for k, v in sums.items()}}
        if probe_set is not None and cfg["probe_every"] and (
                (epoch + 1) % cfg["probe_every"] == 0 or epoch + 1 == cfg["epochs"]):
            rec["probe_iou"] = mean_iou(field, probe_set, cfg["probe_points"], seed=cfg.get("probe_seed", 3000))
        history.append(rec)
        log_fn(rec)
    if out_dir:
        save_field(field, out_dir, {"finetune": {k: v for k, v in cfg.items()}, "history": history})
    return {"field": field, "history": history, "config": cfg}
