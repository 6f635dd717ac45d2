import numpy as np
import pytest
import torch

from depthsdf.geometry import DepthMap, OrthoCamera
from depthsdf.pifu import ConditionedSet, load_field, make_field, train_pifu_supervised
from depthsdf.render import RayMarchConfig, field_sdf_fn, pixel_rays, render_rays
from depthsdf.selfsup import (finetune_self, loss_surface, loss_volume, sample_volume_pseudo, surface_loss,
                              volume_loss)
from depthsdf.synthdata import plane_slab, raycast, sphere
from _oracles import check_grads, loop_surface_loss, loop_volume_loss

SMALL = {"hourglass_width": 8, "feature_channels": 8, "stem_downsample": 1, "hourglass_depth": 2,
         "mlp": [16, 16, 8]}


def test_pseudo_batch_labels():
    trip = raycast(sphere(0.5), OrthoCamera(32, 32))
    b = sample_volume_pseudo(trip.depth, 3, 200, 0.015, seed=1, source_id="s")
    assert len(b) == 800 and b.source_id == "s" and b.sigma == 0.015
    lab = b.labels.reshape(200, 4)
    pts = b.points.reshape(200, 4, 3)
    assert np.all(lab[:, 0] == 0)
    assert np.all((np.abs(lab[:, 1:]) > 0) & (np.abs(lab[:, 1:]) <= 0.015))
    # offset toward +z carries a positive label
    np.testing.assert_allclose(pts[:, 1:, 2] - pts[:, :1, 2], lab[:, 1:], atol=1e-12)
    np.testing.assert_array_equal(pts[:, 1:, :2], np.repeat(pts[:, :1, :2], 3, 1))
    assert b.sign_valid.all()


def test_pseudo_labels_exact_on_frontal_plane():
    trip = raycast(plane_slab(0.0), OrthoCamera(32, 32))
    b = sample_volume_pseudo(trip.depth, 3, 256, 0.015, seed=0)
    np.testing.assert_allclose(b.labels, trip.shape.sdf(b.points), atol=2e-5)


def test_pseudo_label_bounds_true_sdf():
    for shape in (sphere(0.5), sphere(0.3, (0.2, -0.1, 0.1))):
        trip = raycast(shape, OrthoCamera(48, 48))
        b = sample_volume_pseudo(trip.depth, 4, 1024, 0.015, seed=3)
        assert np.all(np.abs(shape.sdf(b.points)) <= np.abs(b.labels) + 2e-5)


def test_central_ray_labels_equal_sdf():
    cam = OrthoCamera(21, 21, 1.05)
    trip = raycast(sphere(0.5), cam)
    depth = np.full((21, 21), -1.0)
    mask = np.zeros((21, 21), bool)
    depth[10, 10], mask[10, 10] = trip.depth.depth[10, 10], True
    b = sample_volume_pseudo(DepthMap(cam, depth, mask), 8, 4, 0.015, seed=2)
    np.testing.assert_allclose(b.labels, trip.shape.sdf(b.points), atol=2e-5)


def test_pseudo_sampling_errors():
    cam = OrthoCamera(4, 4)
    with pytest.raises(ValueError):
        sample_volume_pseudo(DepthMap(cam, np.zeros((4, 4)), np.zeros((4, 4))), 3, 8)
    with pytest.raises(ValueError):
        sample_volume_pseudo(DepthMap(cam, np.zeros((4, 4)), np.ones((4, 4))), 3, 8, sigma=0)


def test_pixel_budget_draws_without_replacement_when_possible():
    trip = raycast(sphere(0.5), OrthoCamera(32, 32))
    b = sample_volume_pseudo(trip.depth, 1, 100, seed=0)
    surf = b.points.reshape(100, 2, 3)[:, 0]
    assert len(np.unique(surf, axis=0)) == 100


class _Batch:
    def __init__(self, labels, valid=None):
        self.labels = np.asarray(labels, float)
        self.sign_valid = np.ones(len(self.labels), bool) if valid is None else valid


def test_volume_loss_examples_and_oracle():
    assert loss_volume([0.1, -0.2], _Batch([0.1, -0.2])) == 0
    assert abs(loss_volume([0.5], _Batch([-0.5]), 1.0) - 2.0) < 1e-12
    rng = np.random.default_rng(0)
    p, t = rng.normal(scale=0.02, size=200), rng.normal(scale=0.02, size=200)
    assert abs(loss_volume(p, _Batch(t), 1.0) - loop_volume_loss(p, t, 1.0)) < 1e-6
    with pytest.raises(ValueError):
        loss_volume(p[:10], _Batch(t))


def test_volume_loss_properties():
    rng = np.random.default_rng(1)
    p, t = rng.normal(size=100), rng.normal(size=100)
    b = _Batch(t)
    assert loss_volume(p, b, 1.0) >= loss_volume(p, b, 0.0)
    assert loss_volume(-p, _Batch(-t), 1.0) == pytest.approx(loss_volume(p, b, 1.0), abs=1e-12)
    same = np.abs(p) * np.sign(t)
    assert loss_volume(same, b, 1.0) == pytest.approx(loss_volume(same, b, 0.0), abs=1e-15)


def test_surface_loss_examples_and_oracle():
    cam = OrthoCamera(6, 5)
    rng = np.random.default_rng(2)
    m = rng.random((5, 6)) < 0.7
    d = rng.uniform(-0.5, 0.5, (5, 6))
    a = DepthMap(cam, d, m)
    assert loss_surface(a, a) == 0
    assert abs(loss_surface(DepthMap(cam, d + 0.05, m), a) - 0.0025) < 1e-12
    m2 = rng.random((5, 6)) < 0.7
    r = rng.uniform(-0.5, 0.5, (5, 6))
    got = loss_surface(DepthMap(cam, r, m2), a)
    assert abs(got - loop_surface_loss(r, d, m & m2)) < 1e-6
    with pytest.raises(ValueError):
        loss_surface(DepthMap(cam, r, np.zeros((5, 6))), a)
    with pytest.raises(ValueError):
        loss_surface(DepthMap(OrthoCamera(5, 5), np.zeros((5, 5)), np.ones((5, 5))), a)


def test_loss_gradients(f64):
    g = torch.Generator().manual_seed(0)
    pred = torch.randn(50, generator=g) * 0.02
    lab = torch.randn(50, generator=g) * 0.02
    assert check_grads(lambda: volume_loss(pred, lab, None, 1.0), {"pred": pred}) <= 1e-4
    r = torch.randn(30, generator=g)
    e = torch.randn(30, generator=g)
    valid = torch.rand(30, generator=g) < 0.6
    assert check_grads(lambda: surface_loss(r, e, valid), {"r": r}) <= 1e-4


def _wild(tiny_data, mode="D"):
    ds = tiny_data["wild"]
    return ConditionedSet(ds, mode), [s.depth for s in ds]


@pytest.fixture(scope="module")
def warm(tiny_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("warm")
    train_pifu_supervised(ConditionedSet(tiny_data["train"], "D"), "D",
                          {"field": SMALL, "epochs": 150, "batch_size": 2, "n_points": 2000,
                           "probe_every": 0, "lr": 3e-3, "seed": 0}, out_dir=str(out), log_fn=lambda r: None)
    return str(out)


def test_finetune_terms_decrease_and_determinism(tiny_data, warm):
    wild, depth = _wild(tiny_data)
    cfg = {"epochs": 8, "batch_size": 2, "pixel_budget": 256, "render_pixels": 64, "lr": 1e-3}

    def run(over):
        torch.manual_seed(0)
        return finetune_self(load_field(warm), wild, depth, dict(cfg, **over), log_fn=lambda r: None)["history"]

    vol = run({"lambda_surf": 0.0})
    assert vol[-1]["vol"] < vol[0]["vol"]
    surf = run({"w_vol": 0.0, "lambda_surf": 100.0, "march": {"max_steps": 64}})
    assert 0 < surf[-1]["surf"] < surf[0]["surf"]
    a = run({"epochs": 2})
    b = run({"epochs": 2})
    assert [h["loss"] for h in a] == [h["loss"] for h in b]


def test_finetune_mixes_supervised_batch(tiny_data):
    wild, depth = _wild(tiny_data)
    synth = ConditionedSet(tiny_data["train"], "D")
    torch.manual_seed(0)
    f = make_field("D", SMALL)
    h = finetune_self(f, wild, depth, {"epochs": 1, "pixel_budget": 128, "render_pixels": 32,
                                       "sup_points": 500}, synthetic=synth, log_fn=lambda r: None)["history"]
    assert h[0]["sup"] > 0
    total = h[0]["vol"] + 0.618 * h[0]["surf"] + h[0]["sup"]
    assert h[0]["loss"] == pytest.approx(total, rel=1e-5)


def test_finetune_rejects_empty_wild():
    class Empty(list):
        pass

    with pytest.raises(ValueError):
        finetune_self(make_field("D", SMALL), Empty(), [])


def test_rendered_depth_gradient_reaches_field(tiny_data, warm):
    f = load_field(warm)
    wild, depth = _wild(tiny_data)
    fm = f.encode(wild.cond[0])
    v, u = np.nonzero(depth[0].mask)
    xy = pixel_rays(depth[0].camera, np.stack([u, v], 1), fm.dtype)
    d, hit = render_rays(field_sdf_fn(f, fm), xy, RayMarchConfig())
    assert hit.sum() > 10
    # refined depth is z - s(z), so each converged ray contributes -1 to the output bias
    (g,) = torch.autograd.grad(d[hit].sum(), f.decoder.l4.bias)
    assert g.item() == pytest.approx(-float(hit.sum()), rel=1e-5)
