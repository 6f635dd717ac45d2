import hashlib
import json
import os

import numpy as np
import pytest

from depthsdf.geometry import OrthoCamera, back_project
from depthsdf.synthdata import (RANGES, AnalyticShape, Dataset, generate_dataset, random_shape, raycast,
                                sample_rng, shape_sdf, sphere, two_sphere_blend)


def test_unit_sphere_values():
    s = sphere(1.0)
    assert shape_sdf(s, np.array([0.0, 0, 0])) == -1.0
    assert shape_sdf(s, np.array([2.0, 0, 0])) == 1.0


def test_smooth_union_never_exceeds_hard_union():
    s = two_sphere_blend(0.1)
    rng = np.random.default_rng(0)
    p = rng.uniform(-1, 1, (1000, 3))
    a = np.linalg.norm(p - [-0.25, 0, 0], axis=1) - 0.35
    b = np.linalg.norm(p - [0.25, 0, 0], axis=1) - 0.3
    hard = np.minimum(a, b)
    soft = shape_sdf(s, p)
    assert np.all(soft <= hard + 1e-12)
    far = np.abs(a - b) >= 0.1
    np.testing.assert_allclose(soft[far], hard[far], atol=1e-12)


def test_sphere_render_examples():
    cam = OrthoCamera(40, 40, 1.0)
    trip = raycast(sphere(0.5), cam)
    # x = 0.025 * (2u + 1) - 1: u=19/20 straddle the axis, u=25 sits at x=0.275
    u_c, v_c = 19, 19
    x, y = cam.pixel_to_world(u_c, v_c)
    assert abs(trip.depth.depth[v_c, u_c] - np.sqrt(0.25 - x * x - y * y)) < 1e-5
    cam2 = OrthoCamera(21, 21, 1.05)  # pixel centers on multiples of 0.1
    t2 = raycast(sphere(0.5), cam2)
    assert abs(t2.depth.depth[10, 10] - 0.5) < 1e-5
    assert abs(t2.depth.depth[10, 13] - 0.4) < 1e-5  # x = 0.3
    assert not t2.mask[10, 16]  # x = 0.6 misses


def _figure(seed=3, split="train"):
    return random_shape(sample_rng(seed, 0, split), split)


def test_rendered_points_lie_on_surface_and_normals_match():
    for i in range(4):
        shape = random_shape(sample_rng(5, i, "wild"), "wild")
        trip = raycast(shape, OrthoCamera(48, 48))
        pts = back_project(trip.depth).points
        assert np.abs(shape.sdf(pts)).max() <= 1e-4
        g = shape.gradient(pts)
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        n = trip.normal.normals[trip.mask]
        ang = np.degrees(np.arccos(np.clip((g * n).sum(1), -1, 1)))
        assert ang.max() <= 1.0
        assert np.abs(np.linalg.norm(n, axis=1) - 1).max() <= 1e-5


def test_masks_shared_and_background_black():
    trip = raycast(_figure(), OrthoCamera(32, 32))
    assert np.array_equal(trip.normal.mask, trip.depth.mask)
    assert np.all(trip.image[~trip.mask] == 0)
    assert np.all((trip.image >= 0) & (trip.image <= 1))
    assert trip.depth.in_range()


def test_shapes_fit_box_and_lipschitz_bound():
    rng = np.random.default_rng(0)
    for split in ("train", "test", "wild"):
        for i in range(10):
            s = random_shape(sample_rng(1, i, split), split)
            lo, hi = s.bounds()
            assert lo.min() >= -0.9 and hi.max() <= 0.9
            p = rng.uniform(-1, 1, (500, 3))
            q = p + rng.normal(scale=0.05, size=p.shape)
            ratio = np.abs(s.sdf(p) - s.sdf(q)) / np.linalg.norm(p - q, axis=1)
            assert ratio.max() <= s.lipschitz + 1e-9
            # points just outside the bounding box are outside the shape
            corner = np.array([hi + 0.01])
            assert s.sdf(corner)[0] > 0


def test_wild_parameters_disjoint_from_train():
    for key in ("blend", "amplitude", "frequency"):
        a, b = RANGES["train"][key], RANGES["wild"][key]
        assert a[1] < b[0] or b[1] < a[0]


def _digest(path):
    h = hashlib.sha256()
    for name in sorted(os.listdir(path)):
        h.update(name.encode())
        with open(os.path.join(path, name), "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def test_generate_dataset_is_deterministic(tmp_path):
    generate_dataset(4, "train", 16, 7, tmp_path / "a")
    generate_dataset(4, "train", 16, 7, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_threaded_generation_matches_serial(tmp_path):
    generate_dataset(3, "test", 16, 2, tmp_path / "a")
    generate_dataset(3, "test", 16, 2, tmp_path / "b", threads=3)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_train_and_wild_shapes_disjoint(tmp_path):
    generate_dataset(4, "train", 16, 7, tmp_path / "t")
    generate_dataset(4, "wild", 16, 7, tmp_path / "w")

    def params(d):
        return {json.dumps(s.shape.to_dict()["root"], sort_keys=True) for s in Dataset(d)}

    assert not params(tmp_path / "t") & params(tmp_path / "w")


def test_dataset_files_and_oracle(tiny_data):
    ds = tiny_data["train"]
    m = ds.manifest
    assert m["split"] == "train" and len(m["samples"]) == len(ds) == 6
    for e in m["samples"]:
        for k in ("img", "nrm", "dpt", "shape"):
            assert os.path.exists(os.path.join(ds.root, e[k]))
    for s in ds:
        assert isinstance(s.shape, AnalyticShape)
        pts = back_project(s.depth).points
        assert np.abs(s.shape.sdf(pts)).max() <= 1e-4


def test_unknown_split(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(1, "val", 16, 0, tmp_path)


def test_dataset_normals_unit_and_front_facing(tiny_data):
    for split in ("train", "wild"):
        for s in tiny_data[split]:
            n = s.normal.normals[s.mask]
            assert np.abs(np.linalg.norm(n, axis=1) - 1).max() <= 1e-5
            assert n[:, 2].min() >= 0
