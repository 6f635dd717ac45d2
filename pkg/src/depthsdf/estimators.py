"""Normal and depth estimators (image -> normal, image + normal -> depth) and their losses."""

from __future__ import annotations

import json
import logging
import os

import numpy as np
import torch
import torch.nn as nn

from . import diffcore as dc
from .checkpoint import load_state, read_meta, save_module
from .geometry import DEPTH_SENTINEL, DepthMap, NormalMap

log = logging.getLogger(__name__)

LAMBDA_COS = 1.25
LAMBDA_N = 1.0
COS_CLAMP = 1e-7
NORMAL_EPS = 1e-8


class ConvBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv = dc.Conv3x3(c_in, c_out, stride)
        self.norm = dc.GroupNorm(dc.num_groups(c_out), c_out)

    def forward(self, x):
        return dc.relu(self.norm(self.conv(x)))


class UNet(nn.Module):
    """Four-level encoder-decoder with skip connections and 3x3 kernels."""

    def __init__(self, c_in: int, c_out: int, width: int = 16, levels: int = 4):
        super().__init__()
        widths = [width * 2**i for i in range(levels)]
        self.down = nn.ModuleList()
        prev = c_in
        for i, w in enumerate(widths):
            self.down.append(nn.Sequential(ConvBlock(prev, w, stride=1 if i == 0 else 2), ConvBlock(w, w)))
            prev = w
        self.up = nn.ModuleList(
            ConvBlock(widths[i + 1] + widths[i], widths[i]) for i in reversed(range(levels - 1)))
        self.head = dc.Conv1x1(widths[0], c_out)
        self.levels = levels

    def forward(self, x):
        if x.shape[-1] % 2 ** (self.levels - 1) or x.shape[-2] % 2 ** (self.levels - 1):
            raise dc.ShapeError(f"input size must be divisible by {2 ** (self.levels - 1)}")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
        x = skips.pop()
        for block in self.up:
            x = block(dc.concat([dc.upsample(x, 2), skips.pop()], 1))
        return self.head(x)


class NormalNet(UNet):
    def __init__(self, width: int = 16):
        super().__init__(3, 3, width)
        self.width = width

    def forward(self, image):
        raw = super().forward(image)
        return raw / torch.sqrt((raw * raw).sum(1, keepdim=True) + NORMAL_EPS)


class DepthNet(UNet):
    def __init__(self, width: int = 16):
        super().__init__(6, 1, width)
        self.width = width

    def forward(self, image, normal):
        return super().forward(dc.concat([image, normal], 1))[:, 0]


# ---------------------------------------------------------------------------
# losses on batched tensors: normals (B,3,H,W), depth (B,H,W), mask (B,H,W) bool


def normal_loss(pred, gt, mask, lambda_cos: float = LAMBDA_COS, lambda_n: float = LAMBDA_N):
    m = mask.to(pred.dtype)[:, None]
    count = m.sum()
    if count == 0:
        raise ValueError("empty foreground")
    pn = pred / torch.sqrt((pred * pred).sum(1, keepdim=True) + NORMAL_EPS)
    gn = gt / torch.sqrt((gt * gt).sum(1, keepdim=True) + NORMAL_EPS)
    cos = torch.clamp((pn * gn).sum(1, keepdim=True), -1 + COS_CLAMP, 1 - COS_CLAMP)
    ang = (torch.arccos(cos) * m).sum() / count
    l1 = (torch.abs(gt - pred) * m).sum() / (3 * count)
    return lambda_cos * ang + lambda_n * l1


def depth_loss(pred, gt, mask):
    m = mask.to(pred.dtype)
    count = m.sum()
    if count == 0:
        raise ValueError("empty foreground")
    return (torch.abs(gt - pred) * m).sum() / count


def loss_normal(pred: NormalMap, gt: NormalMap, lambda_cos: float = LAMBDA_COS,
                lambda_n: float = LAMBDA_N) -> float:
    if not np.array_equal(pred.mask, gt.mask):
        raise ValueError("normal maps have different masks")
    p = torch.from_numpy(np.moveaxis(pred.normals, -1, 0)[None].astype(np.float64))
    g = torch.from_numpy(np.moveaxis(gt.normals, -1, 0)[None].astype(np.float64))
    return float(normal_loss(p, g, torch.from_numpy(gt.mask[None]), lambda_cos, lambda_n))


def loss_depth(pred: DepthMap, gt: DepthMap) -> float:
    if not np.array_equal(pred.mask, gt.mask):
        raise ValueError("depth maps have different masks")
    p = torch.from_numpy(pred.depth[None].astype(np.float64))
    g = torch.from_numpy(gt.depth[None].astype(np.float64))
    return float(depth_loss(p, g, torch.from_numpy(gt.mask[None])))


# ---------------------------------------------------------------------------
# inference


def _image_tensor(image, mask):
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError("image must be H x W x 3")
    return torch.from_numpy(np.moveaxis(image * mask[..., None], -1, 0)[None].copy())


def estimate_normal(net: NormalNet, image, mask, camera) -> NormalMap:
    mask = np.asarray(mask, bool)
    with torch.no_grad():
        n = net(_image_tensor(image, mask))[0]
    normals = np.moveaxis(n.numpy().astype(np.float64), 0, -1)
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    normals[~mask] = 0.0
    return NormalMap(camera, normals, mask)


def estimate_depth(net: DepthNet, image, normal: NormalMap) -> DepthMap:
    if np.asarray(image).shape[:2] != normal.mask.shape:
        raise ValueError("image and normal map resolutions differ")
    img = _image_tensor(image, normal.mask)
    nrm = torch.from_numpy(np.moveaxis(normal.normals, -1, 0)[None].astype(np.float32))
    with torch.no_grad():
        d = net(img, nrm)[0].numpy().astype(np.float64)
    cam = normal.camera
    d = np.clip(d, cam.z_far, cam.z_near)
    d[~normal.mask] = DEPTH_SENTINEL
    return DepthMap(cam, d, normal.mask.copy())


# ---------------------------------------------------------------------------
# training


def _stack(dataset, indices):
    imgs, nrms, dpts, masks = [], [], [], []
    for i in indices:
        s = dataset[i]
        m = s.mask
        imgs.append(np.moveaxis(s.image * m[..., None], -1, 0))
        nrms.append(np.moveaxis(s.normal.normals, -1, 0))
        dpts.append(s.depth.depth)
        masks.append(m)
    f = lambda a: torch.from_numpy(np.stack(a).astype(np.float32))  # noqa: E731
    return f(imgs), f(nrms), f(dpts), torch.from_numpy(np.stack(masks))


def train_estimators(dataset, config: dict, out_dir=None, log_fn=None) -> dict:
    """Train NormalNet on image->normal, then DepthNet on image + predicted normal -> depth.

    Returns the nets and per-epoch loss curves; writes checkpoints when ``out_dir`` is set.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    cfg = {"width": 16, "epochs": 30, "lr": 1e-3, "lr_drop": 0.0, "batch_size": 8, "augment": "none",
           "seed": 0}
    cfg.update(config or {})
    log_fn = log_fn or (lambda rec: log.info("%s", rec))
    torch.manual_seed(cfg["seed"])
    nnet = NormalNet(cfg["width"])
    dnet = DepthNet(cfg["width"])
    imgs, nrms, dpts, masks = _stack(dataset, range(len(dataset)))
    if cfg["augment"] != "none":
        imgs, nrms, dpts, masks = _augmented(imgs, nrms, dpts, masks, cfg["augment"])
    n = len(imgs)
    bs = cfg["batch_size"]

    nctx_fn = lambda image, gt, mask: normal_loss(nnet(image), gt, mask)  # noqa: E731
    nnet_fit = dc.GradContext(nctx_fn, dict(nnet.named_parameters()))
    curve_n = _train_loop(nnet_fit, lambda idx: {"image": imgs[idx], "gt": nrms[idx], "mask": masks[idx]},
                          cfg, n, bs, np.random.default_rng(cfg["seed"]), log_fn, "normal")

    with torch.no_grad():
        pred_n = torch.cat([nnet(imgs[i:i + bs]) for i in range(0, n, bs)]) * masks[:, None]
    dctx_fn = lambda image, normal, gt, mask: depth_loss(dnet(image, normal), gt, mask)  # noqa: E731
    dnet_fit = dc.GradContext(dctx_fn, dict(dnet.named_parameters()))
    curve_d = _train_loop(dnet_fit, lambda idx: {"image": imgs[idx], "normal": pred_n[idx],
                                                 "gt": dpts[idx], "mask": masks[idx]},
                          cfg, n, bs, np.random.default_rng(cfg["seed"] + 1), log_fn, "depth")
    if out_dir:
        save_module(nnet, os.path.join(out_dir, "normal"), "normal_net", {"width": cfg["width"]})
        save_module(dnet, os.path.join(out_dir, "depth"), "depth_net", {"width": cfg["width"]})
        with open(os.path.join(out_dir, "losses.json"), "w") as fh:
            json.dump({"normal": curve_n, "depth": curve_d, "config": cfg}, fh, indent=1, sort_keys=True)
    return {"normal_net": nnet, "depth_net": dnet, "normal_curve": curve_n, "depth_curve": curve_d}


def _augmented(imgs, nrms, dpts, masks, kind: str):
    """Append flipped ("mirror") or all eight dihedral ("dihedral") copies of the rasters.

    Rasters are (B, C, H, W) with u along W and v along H; world x follows u and
    world y is opposite to v, so normals are transformed along with the pixels.
    """
    if kind not in ("mirror", "dihedral"):
        raise ValueError(f"unknown augmentation {kind!r}")

    def flip_u(n):
        n = n.flip(-1).clone()
        n[:, 0] = -n[:, 0]
        return n

    def rot90(n):
        # (u, v) -> (v, W-1-u) on the raster, i.e. world (x, y) -> (-y, x)
        n = torch.rot90(n, 1, (-2, -1)).clone()
        return torch.stack([-n[:, 1], n[:, 0], n[:, 2]], 1)

    out = [(imgs, nrms, dpts, masks)]
    if kind == "mirror":
        out.append((imgs.flip(-1), flip_u(nrms), dpts.flip(-1), masks.flip(-1)))
    else:
        for k in range(4):
            i, n, d, m = out[0]
            for _ in range(k):
                i, n = torch.rot90(i, 1, (-2, -1)), rot90(n)
                d, m = torch.rot90(d, 1, (-2, -1)), torch.rot90(m, 1, (-2, -1))
            if k:
                out.append((i, n, d, m))
            out.append((i.flip(-1), flip_u(n), d.flip(-1), m.flip(-1)))
    return tuple(torch.cat([o[j] for o in out]) for j in range(4))


def _train_loop(ctx: dc.GradContext, batch_fn, cfg, n, bs, rng, log_fn, name):
    opt = dc.Adam(cfg["lr"])
    curve = []
    for epoch in range(cfg["epochs"]):
        if cfg["lr_drop"] and epoch >= cfg["lr_drop"] * cfg["epochs"]:
            opt.lr = cfg["lr"] * 0.1
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss = ctx.forward(**batch_fn(idx))
            opt.step(ctx.params, ctx.gradient(loss))
            total += loss.item() * len(idx)
        curve.append(total / n)
        log_fn({"net": name, "epoch": epoch + 1, "loss": curve[-1]})
    return curve


def load_estimators(ckpt_dir) -> tuple:
    meta_n = read_meta(os.path.join(ckpt_dir, "normal"))
    meta_d = read_meta(os.path.join(ckpt_dir, "depth"))
    nnet = load_state(NormalNet(meta_n["config"]["width"]), os.path.join(ckpt_dir, "normal"), meta_n)
    dnet = load_state(DepthNet(meta_d["config"]["width"]), os.path.join(ckpt_dir, "depth"), meta_d)
    return nnet.eval(), dnet.eval()


def predict_rasters(nnet, dnet, sample) -> tuple:
    """Estimated (NormalMap, DepthMap) for one dataset sample."""
    nm = estimate_normal(nnet, sample.image, sample.mask, sample.camera)
    return nm, estimate_depth(dnet, sample.image, nm)

