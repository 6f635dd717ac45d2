import math

import numpy as np
import pytest
import torch

from depthsdf import diffcore as dc
from depthsdf.pifu import (DESK_FIELD, FULL_FIELD, ConditionedSet, ImplicitField, build_conditioning, eval_sdf,
                           field_iou, load_field, make_field, mode_channels, sample_feature,
                           sample_supervised_batch, save_field, supervised_loss, train_pifu_supervised)
from depthsdf.synthdata import sphere, two_sphere_blend
from _oracles import check_grads

SMALL = {"hourglass_width": 8, "feature_channels": 8, "stem_downsample": 1, "hourglass_depth": 2,
         "mlp": [16, 16, 8]}


def test_mode_channels():
    assert [mode_channels(m) for m in ("I", "N", "D", "IN", "ID", "ND", "IND")] == [4, 4, 2, 7, 5, 5, 8]
    with pytest.raises(ValueError):
        mode_channels("X")


def test_desk_feature_map_shape():
    torch.manual_seed(0)
    f = make_field("D")
    assert f.decoder_input_width == DESK_FIELD["feature_channels"] + 1
    with torch.no_grad():
        fm = f.encode(torch.zeros(1, 2, 128, 128))
    assert tuple(fm.shape) == (1, 64, 64, 64)


def test_full_size_feature_map_shape():
    with torch.device("meta"):
        f = ImplicitField("D", **FULL_FIELD)
        fm = f.encode(torch.zeros(1, 2, 512, 512, device="meta"))
    assert tuple(fm.shape) == (1, 256, 128, 128)
    assert f.decoder_input_width == 257


def test_channel_mismatch_raises():
    f = make_field("D", SMALL)
    with pytest.raises(dc.ShapeError):
        f.encode(torch.zeros(1, 3, 16, 16))


def test_background_changes_do_not_reach_features():
    rng = np.random.default_rng(0)
    mask = np.zeros((32, 32), bool)
    mask[8:24, 10:22] = True
    a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
    b[mask] = a[mask]
    da = rng.uniform(-1, 1, (32, 32))
    db = np.where(mask, da, rng.uniform(-1, 1, (32, 32)))
    f = make_field("ID", SMALL)
    ca = build_conditioning("ID", mask, a, depth=da)
    cb = build_conditioning("ID", mask, b, depth=db)
    assert np.array_equal(ca, cb)
    with torch.no_grad():
        assert torch.equal(f.encode(ca), f.encode(cb))


def test_sample_feature_nodes_and_midpoints(f64):
    fm = torch.randn(1, 4, 5, 6)
    uv = torch.tensor([[[2.0, 3.0], [0.0, 0.0], [2.5, 3.0], [4.0, 1.5]]])
    out = sample_feature(fm, uv)[0]
    torch.testing.assert_close(out[0], fm[0, :, 3, 2], rtol=0, atol=1e-14)
    torch.testing.assert_close(out[1], fm[0, :, 0, 0], rtol=0, atol=1e-14)
    torch.testing.assert_close(out[2], 0.5 * (fm[0, :, 3, 2] + fm[0, :, 3, 3]), rtol=0, atol=1e-14)
    torch.testing.assert_close(out[3], 0.5 * (fm[0, :, 1, 4] + fm[0, :, 2, 4]), rtol=0, atol=1e-14)
    # out-of-bounds lookups clamp to the border
    far = sample_feature(fm, torch.tensor([[[-3.0, 2.0], [40.0, 4.0]]]))[0]
    torch.testing.assert_close(far[0], fm[0, :, 2, 0])
    torch.testing.assert_close(far[1], fm[0, :, 4, 5])


def test_sample_feature_gradient(f64):
    fm = torch.randn(1, 3, 4, 4)
    uv = torch.tensor([[[1.3, 2.2], [0.4, 0.9], [2.7, 1.1]]])
    w = torch.randn(1, 3, 3)
    assert check_grads(lambda: (sample_feature(fm, uv) * w).sum(), {"fm": fm}) <= 1e-4


def test_zero_decoder_returns_bias():
    f = make_field("D", SMALL)
    with torch.no_grad():
        for p in f.decoder.parameters():
            p.zero_()
        f.decoder.l4.bias.fill_(0.2)
    cond = torch.randn(2, 16, 16)
    out = eval_sdf(f, cond, np.random.default_rng(0).uniform(-1, 1, (50, 3)))
    assert np.all(out == np.float32(0.2))


def test_eval_sdf_permutation_and_batch_invariance(f64):
    torch.manual_seed(1)
    f = make_field("D", SMALL).double()
    cond = torch.randn(2, 16, 16)
    pts = np.random.default_rng(1).uniform(-1, 1, (40, 3))
    full = eval_sdf(f, cond, pts)
    perm = np.random.default_rng(2).permutation(40)
    np.testing.assert_array_equal(eval_sdf(f, cond, pts[perm]), full[perm])
    single = np.array([eval_sdf(f, cond, p[None])[0] for p in pts])
    np.testing.assert_allclose(single, full, rtol=0, atol=1e-14)
    np.testing.assert_array_equal(eval_sdf(f, cond, pts, chunk=7), full)
    np.testing.assert_array_equal(eval_sdf(f, cond, pts), full)


def test_eval_sdf_parameter_gradients(f64):
    torch.manual_seed(2)
    f = make_field("D", SMALL).double()
    cond = torch.randn(1, 2, 16, 16)
    pts = torch.tensor([[[0.1, -0.3, 0.2], [-0.45, 0.5, -0.1]]])
    worst = check_grads(lambda: f(cond, pts).sum(), dict(f.named_parameters()), max_entries=6)
    assert worst <= 1e-4


def test_pixel_alignment_under_period_shift(f64):
    torch.manual_seed(3)
    f = make_field("D", SMALL).double()
    period = f.encoder.period
    # large canvas: the object stays clear of the zero-padded border at every level
    H = 256
    mask = np.zeros((H, H), bool)
    mask[116:134, 114:132] = True
    depth = np.where(mask, np.random.default_rng(0).uniform(-0.3, 0.3, (H, H)), -1.0)
    shift = period
    mask2 = np.roll(mask, shift, axis=1)
    depth2 = np.roll(depth, shift, axis=1)
    c1 = build_conditioning("D", mask, depth=depth)
    c2 = build_conditioning("D", mask2, depth=depth2)
    rng = np.random.default_rng(4)
    # interior points of the first raster, in world units
    u = rng.uniform(118, 128, 30)
    v = rng.uniform(118, 130, 30)
    x = 2 * (u + 0.5) / H - 1
    y = 1 - 2 * (v + 0.5) / H
    pts = np.stack([x, y, rng.uniform(-0.3, 0.3, 30)], 1)
    moved = pts.copy()
    moved[:, 0] += 2 * shift / H
    np.testing.assert_allclose(eval_sdf(f, c1, pts), eval_sdf(f, c2, moved), atol=1e-10)


def test_supervised_batch_contract():
    s = two_sphere_blend()
    b = sample_supervised_batch(s, 8000, 5)
    assert len(b) == 8000
    assert math.ceil(15 / 16 * 8000) == 7500
    np.testing.assert_array_equal(b.labels, s.sdf(b.points))
    assert np.all(np.abs(b.points) <= 1) and np.all(np.abs(b.labels) <= 2 * math.sqrt(3))
    assert b.sign_valid.all()
    near = np.abs(b.labels[:7500])
    assert np.median(near) < 0.05
    b2 = sample_supervised_batch(s, 8000, 5)
    np.testing.assert_array_equal(b.points, b2.points)
    with pytest.raises(ValueError):
        sample_supervised_batch(s, 1, 0)


def test_supervised_loss_values():
    pred = torch.tensor([0.05, -0.02, 0.3])
    lab = torch.tensor([0.05, 0.01, 0.5])
    # third label clamps to 0.1; second point has a sign error
    want = (0 + 0.03 + 0.2) / 3 + 0.03 / 3
    assert abs(supervised_loss(pred, lab).item() - want) < 1e-7


def test_unknown_mode_rejected(tiny_data):
    with pytest.raises(ValueError):
        train_pifu_supervised(ConditionedSet(tiny_data["train"], "D"), "Q", {})


def test_training_loss_decreases_and_checkpoint_round_trip(tiny_data, tmp_path):
    tr = ConditionedSet(tiny_data["train"], "D")
    te = ConditionedSet(tiny_data["test"], "D")
    cfg = {"epochs": 10, "batch_size": 2, "n_points": 1000, "probe_every": 5, "probe_points": 500,
           "field": SMALL, "lr_drop": 0}
    res = train_pifu_supervised(tr, "D", cfg, te, tmp_path / "ck", log_fn=lambda r: None)
    c = res["curve"]
    assert c[-1] < c[0]
    assert "test_iou" in res["history"][4] and "train_iou" in res["history"][-1]
    back = load_field(tmp_path / "ck")
    pts = np.random.default_rng(0).uniform(-1, 1, (30, 3))
    np.testing.assert_array_equal(eval_sdf(back, tr.cond[0], pts), eval_sdf(res["field"], tr.cond[0], pts))
    assert back.input_mode == "D"


def test_single_shape_overfit():
    from depthsdf.geometry import OrthoCamera
    from depthsdf.synthdata import raycast

    trip = raycast(sphere(0.5, (0.1, 0.0, 0.0)), OrthoCamera(64, 64))

    class One(list):
        camera = trip.camera

    cset = ConditionedSet(One([trip]), "D")
    cfg = {"epochs": 600, "batch_size": 1, "n_points": 2000, "probe_every": 0, "lr": 3e-3, "lr_drop": 0.75}
    res = train_pifu_supervised(cset, "D", cfg, log_fn=lambda r: None)
    assert field_iou(res["field"], cset.cond[0], trip.shape, 20000, 0, sampler="uniform") > 0.98
