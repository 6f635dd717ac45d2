"""Checks against the checkpoints of the default desk pipeline (slow)."""

import os

import numpy as np
import pytest

from depthsdf.estimators import load_estimators, predict_rasters
from depthsdf.geometry import OrthoCamera
from depthsdf.meshing import reconstruct
from depthsdf.metrics import iou
from depthsdf.pifu import build_conditioning, eval_sdf, load_field, surface_pool
from depthsdf.synthdata import raycast, sphere

pytestmark = pytest.mark.slow

RADIUS = 0.5


@pytest.fixture(scope="module")
def held_out_sphere(desk_run):
    return raycast(sphere(RADIUS), OrthoCamera(128, 128), light_seed=17)


def test_estimators_on_held_out_sphere(desk_run, held_out_sphere):
    s = held_out_sphere
    nnet, dnet = load_estimators(os.path.join(desk_run["dir"], "estimators"))
    nm, dm = predict_rasters(nnet, dnet, s)
    ang = np.degrees(np.arccos(np.clip((nm.normals[s.mask] * s.normal.normals[s.mask]).sum(1), -1, 1)))
    assert ang.mean() < 15
    assert np.abs(dm.depth - s.depth.depth)[s.mask].mean() < 0.02
    np.testing.assert_array_equal(dm.mask, s.mask)


@pytest.mark.parametrize("stage", ["pifu_D", "finetuned"])
def test_field_on_sphere_surface(desk_run, held_out_sphere, stage):
    s = held_out_sphere
    field = load_field(os.path.join(desk_run["dir"], stage)).eval()
    cond = build_conditioning("D", s.mask, depth=s.depth)
    pts = surface_pool(s.shape, 5000, seed=0)
    assert np.abs(eval_sdf(field, cond, pts)).mean() < 0.02
    mesh, stats = reconstruct(field, cond, 128, mask=s.mask)
    assert stats["watertight"]
    assert iou(mesh, s.shape, "uniform", 200000, seed=0) >= 0.9
