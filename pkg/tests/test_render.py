import numpy as np
import pytest
import torch

from depthsdf.geometry import DEPTH_SENTINEL, OrthoCamera
from depthsdf.render import RayMarchConfig, march, pixel_rays, render_depth, render_rays
from depthsdf.synthdata import sphere


def _truth(cam, r):
    x, y = cam.pixel_grid()
    rr = x**2 + y**2
    inside = rr < r * r
    return np.where(inside, np.sqrt(np.clip(r * r - rr, 0, None)), DEPTH_SENTINEL), inside


def test_sphere_depth_matches_closed_form():
    cfg = RayMarchConfig(max_steps=256)
    cam = OrthoCamera(41, 41)
    dm, hit = render_depth(sphere(0.5), None, cam, cfg)
    want, inside = _truth(cam, 0.5)
    assert abs(dm.depth[20, 20] - 0.5) <= 2 * cfg.hit_eps
    # the along-ray error of an |s| < eps stop grows like eps / cos at grazing incidence,
    # so the bound is checked where the surface normal is within ~70 degrees of the ray
    facing = hit & (want >= 0.5 / 3)
    assert facing.sum() > 0.8 * inside.sum()
    assert np.all(np.abs(dm.depth[facing] - want[facing]) <= 2 * cfg.hit_eps)
    assert not np.any(hit & ~inside)
    assert np.all(dm.depth[~hit] == DEPTH_SENTINEL)
    # everything not grazing the silhouette converges
    x, y = cam.pixel_grid()
    assert hit[x**2 + y**2 < 0.45**2].all()


def test_missing_rays_are_flagged():
    xy = torch.tensor([[0.9, 0.9], [-0.7, 0.6], [0.0, 0.0]], dtype=torch.float64)
    z, hit = render_rays(sphere(0.5).sdf_torch, xy, RayMarchConfig())
    assert hit.tolist() == [False, False, True]
    assert z[0] < -1 + 0.5


def test_march_is_monotone_and_never_overshoots():
    cam = OrthoCamera(17, 17)
    shape = sphere(0.6, (0.1, 0, -0.2))
    xy = pixel_rays(cam, dtype=torch.float64)
    trace = []
    cfg = RayMarchConfig(step_scale=1.0)
    z, hit = march(shape.sdf_torch, xy, cfg, trace)
    steps = torch.stack([torch.full_like(z, cfg.z_start)] + trace)
    dz = steps[1:] - steps[:-1]
    # a ray only stands still once it has converged or left the volume
    moving = torch.ones_like(z, dtype=torch.bool)
    for k in range(len(dz)):
        assert torch.all(dz[k][moving] < 0)
        moving &= dz[k] < 0
        moving &= steps[k + 1] >= cfg.z_end
        if k + 1 < len(dz):
            moving &= shape.sdf_torch(torch.cat([xy, steps[k + 1, :, None]], 1)).abs() >= cfg.hit_eps
    x, y = xy[:, 0].numpy(), xy[:, 1].numpy()
    rr = 0.36 - (x - 0.1)**2 - y**2
    first = np.where(rr > 0, -0.2 + np.sqrt(np.clip(rr, 0, None)), -np.inf)
    assert np.all(z.numpy() >= first - cfg.hit_eps)


def _final_query_fd(sdf_of, xy, z, h=1e-6):
    """Central difference of z - s_theta(p) with the marched points held fixed."""
    p = torch.cat([xy, z[:, None]], 1)
    return (-(sdf_of(+h)(p)) + sdf_of(-h)(p)) / (2 * h)


def test_depth_gradient_matches_fixed_trajectory_differences():
    b = torch.tensor(0.0, dtype=torch.float64, requires_grad=True)
    r = torch.tensor(0.5, dtype=torch.float64, requires_grad=True)
    xy = torch.tensor([[0.0, 0.0], [0.2, -0.1], [0.3, 0.25]], dtype=torch.float64)

    def sdf(p, r=r, b=b):
        return p.norm(dim=1) - r + b * (1 + p[:, 0] ** 2)

    d, hit = render_rays(sdf, xy, RayMarchConfig())
    assert hit.all()
    z, _ = march(sdf, xy, RayMarchConfig())
    for param, make in ((b, lambda h: lambda p: sdf(p, b=b.detach() + h)),
                        (r, lambda h: lambda p: sdf(p, r=r.detach() + h))):
        for i in range(len(xy)):
            (g,) = torch.autograd.grad(d[i], param, retain_graph=True)
            fd = _final_query_fd(make, xy[i:i + 1], z[i:i + 1])[0].item()
            assert abs(g.item() - fd) <= 1e-3 * abs(fd)


def test_tighter_hit_eps_shrinks_error():
    cam = OrthoCamera(21, 21)
    xy = pixel_rays(cam, dtype=torch.float64)
    keep = (xy**2).sum(1) < 0.4**2
    want = torch.sqrt(0.5**2 - (xy[keep]**2).sum(1))
    errs = []
    for eps in (1e-2, 1e-3):
        z, hit = march(sphere(0.5).sdf_torch, xy[keep], RayMarchConfig(max_steps=500, hit_eps=eps))
        assert hit.all()
        errs.append((z - want).abs().max().item())
    assert errs[1] * 5 <= errs[0]


@pytest.mark.parametrize("kw", [{"hit_eps": 0}, {"max_steps": 0}, {"step_scale": 1.5},
                                {"step_scale": 0}, {"z_start": -1, "z_end": 1}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        RayMarchConfig(**kw)


def test_config_roundtrip():
    c = RayMarchConfig(max_steps=10)
    assert RayMarchConfig(**c.to_dict()) == c
