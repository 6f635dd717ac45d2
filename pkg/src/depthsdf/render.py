"""Differentiable depth rendering of an SDF along parallel -z rays.

The march runs without gradients; the depth of a converged ray is refined
from the final SDF query, ``D = z_k - s(p_k)``, so gradients reach the field
only through that last evaluation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .geometry import DEPTH_SENTINEL, DepthMap, OrthoCamera


@dataclass
class RayMarchConfig:
    max_steps: int = 64
    hit_eps: float = 1e-3
    step_scale: float = 0.8
    z_start: float = 1.0
    z_end: float = -1.0

    def __post_init__(self):
        if self.hit_eps <= 0:
            raise ValueError("hit_eps must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if not 0 < self.step_scale <= 1:
            raise ValueError("step_scale must lie in (0, 1]")
        if self.z_start <= self.z_end:
            raise ValueError("z_start must be above z_end")

    def to_dict(self) -> dict:
        return asdict(self)


def field_sdf_fn(field, features):
    """(N,3) -> (N,) closure over an encoded implicit field."""
    return lambda p: field.query(features, p[None])[0]


def march(sdf_fn, xy: torch.Tensor, cfg: RayMarchConfig, trace: list | None = None):
    """Sphere-trace rays starting at (x, y, z_start); returns final z and hit flags.

    ``trace``, when given, collects the z of every ray after each step.
    """
    n = len(xy)
    z = torch.full((n,), cfg.z_start, dtype=xy.dtype)
    hit = torch.zeros(n, dtype=torch.bool)
    active = torch.ones(n, dtype=torch.bool)
    with torch.no_grad():
        for _ in range(cfg.max_steps):
            idx = torch.nonzero(active).flatten()
            if len(idx) == 0:
                break
            p = torch.cat([xy[idx], z[idx, None]], 1)
            s = sdf_fn(p).to(z.dtype)
            done = s.abs() < cfg.hit_eps
            hit[idx[done]] = True
            zi = z[idx] - torch.where(done, torch.zeros_like(s), cfg.step_scale * s)
            z[idx] = zi
            active[idx] = ~done & (zi >= cfg.z_end)
            if trace is not None:
                trace.append(z.clone())
    return z, hit


def render_rays(sdf_fn, xy: torch.Tensor, cfg: RayMarchConfig):
    """Rendered depth (with grad through the final query) and convergence mask per ray."""
    z, hit = march(sdf_fn, xy, cfg)
    idx = torch.nonzero(hit).flatten()
    if len(idx) == 0:
        return z, hit
    refined = z[idx] - sdf_fn(torch.cat([xy[idx], z[idx, None]], 1))
    return z.to(refined.dtype).index_put((idx,), refined), hit


def pixel_rays(cam: OrthoCamera, pixels=None, dtype=torch.float32) -> torch.Tensor:
    """World (x, y) of the given (u, v) pixels, or of every pixel in row-major order."""
    if pixels is None:
        x, y = cam.pixel_grid()
        xy = np.stack([x.ravel(), y.ravel()], 1)
    else:
        pixels = np.asarray(pixels)
        x, y = cam.pixel_to_world(pixels[:, 0], pixels[:, 1])
        xy = np.stack([x, y], 1)
    return torch.as_tensor(xy, dtype=dtype)


def render_depth(field, cond, cam: OrthoCamera, cfg: RayMarchConfig | None = None,
                 features=None) -> tuple:
    """Render a full DepthMap of ``field`` under ``cond``; returns (DepthMap, convergence mask).

    ``field`` may also be an object with an ``sdf_torch`` method (analytic oracle),
    in which case ``cond`` is ignored.
    """
    cfg = cfg or RayMarchConfig()
    if hasattr(field, "sdf_torch"):
        fn, dtype = field.sdf_torch, torch.float64
    else:
        dtype = next(field.parameters()).dtype
        with torch.no_grad():
            fm = field.encode(cond) if features is None else features
        fn = field_sdf_fn(field, fm)
    xy = pixel_rays(cam, dtype=dtype)
    with torch.no_grad():
        depth, hit = render_rays(fn, xy, cfg)
    mask = hit.numpy().reshape(cam.height, cam.width)
    d = depth.numpy().astype(np.float64).reshape(cam.height, cam.width)
    d[~mask] = DEPTH_SENTINEL
    return DepthMap(cam, d, mask), mask


def save_rendered(dm: DepthMap, path) -> None:
    """NTF1 with channels (depth, convergence mask)."""
    dm.save(path)
