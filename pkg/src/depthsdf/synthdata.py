"""Procedural analytic-SDF shapes, a sphere-tracing renderer and dataset files.

Shapes are JSON-able composition trees. Every SDF is evaluated in torch
(float64) so exact gradients come from autograd, with numpy wrappers for
callers that only need values.
"""

from __future__ import annotations

import json
import logging
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch

from .diffcore import read_ntf, write_ntf
from .geometry import DEPTH_SENTINEL, DepthMap, NormalMap, OrthoCamera, ensure_dir

log = logging.getLogger(__name__)

SPLITS = ("train", "test", "wild")
BOUND = 0.9
HIT_EPS = 1e-5
NORMAL_STEP = 1e-4
NOISE_LEVEL = 0.1
GENERATOR_VERSION = "synth-1"

# parameter ranges; "wild" draws from ranges disjoint from train/test
RANGES = {
    "train": {"blend": (0.02, 0.06), "amplitude": (0.0, 0.006), "frequency": (8.0, 14.0), "limbs": (2, 4)},
    "wild": {"blend": (0.08, 0.14), "amplitude": (0.012, 0.022), "frequency": (18.0, 28.0), "limbs": (3, 5)},
}
RANGES["test"] = RANGES["train"]


# ---------------------------------------------------------------------------
# primitives


def _t(x):
    return torch.as_tensor(x, dtype=torch.float64)


def sd_sphere(p, center, radius):
    return torch.linalg.norm(p - _t(center), dim=-1) - radius


def sd_capsule(p, a, b, radius):
    a, b = _t(a), _t(b)
    pa, ba = p - a, b - a
    h = torch.clamp((pa @ ba) / (ba @ ba), 0.0, 1.0)
    return torch.linalg.norm(pa - h[:, None] * ba, dim=-1) - radius


def sd_round_box(p, center, half, radius):
    q = torch.abs(p - _t(center)) - (_t(half) - radius)
    outside = torch.linalg.norm(torch.clamp(q, min=0.0), dim=-1)
    inside = torch.clamp(q.max(dim=-1).values, max=0.0)
    return outside + inside - radius


def sd_ellipsoid(p, center, radii):
    # scaled-sphere bound: 1-Lipschitz, exact on spheres, gradient along the true normal
    r = _t(radii)
    return (torch.linalg.norm((p - _t(center)) / r, dim=-1) - 1.0) * r.min()


def smooth_min(a, b, k):
    """Polynomial smooth minimum; never above min(a, b), equal to it when |a-b| >= k."""
    if k <= 0:
        return torch.minimum(a, b)
    h = torch.clamp(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b * (1 - h) + a * h - k * h * (1.0 - h)


def _eval_node(node: dict, p):
    kind = node["type"]
    if kind == "sphere":
        return sd_sphere(p, node["center"], node["radius"])
    if kind == "capsule":
        return sd_capsule(p, node["a"], node["b"], node["radius"])
    if kind == "round_box":
        return sd_round_box(p, node["center"], node["half"], node["radius"])
    if kind == "ellipsoid":
        return sd_ellipsoid(p, node["center"], node["radii"])
    if kind in ("union", "smooth_union"):
        values = [_eval_node(c, p) for c in node["children"]]
        d = values[0]
        for v in values[1:]:
            d = torch.minimum(d, v) if kind == "union" else smooth_min(d, v, node["k"])
        return d
    raise ValueError(f"unknown shape node {kind!r}")


def _node_bounds(node: dict) -> tuple:
    kind = node["type"]
    if kind == "sphere":
        c, r = np.array(node["center"]), node["radius"]
        return c - r, c + r
    if kind == "capsule":
        a, b, r = np.array(node["a"]), np.array(node["b"]), node["radius"]
        return np.minimum(a, b) - r, np.maximum(a, b) + r
    if kind == "round_box":
        c, h = np.array(node["center"]), np.array(node["half"])
        return c - h, c + h
    if kind == "ellipsoid":
        c, r = np.array(node["center"]), np.array(node["radii"])
        return c - r, c + r
    lo, hi = zip(*(_node_bounds(c) for c in node["children"]))
    return np.min(lo, axis=0), np.max(hi, axis=0)


@dataclass
class AnalyticShape:
    """Composition tree plus optional radial sinusoidal displacement."""

    root: dict
    amplitude: float = 0.0
    frequency: float = 0.0
    center: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    kind: str = "custom"

    @property
    def lipschitz(self) -> float:
        return 1.0 + abs(self.amplitude) * self.frequency

    def sdf_torch(self, p):
        d = _eval_node(self.root, p)
        if self.amplitude:
            r = torch.linalg.norm(p - _t(self.center), dim=-1)
            d = d + self.amplitude * torch.sin(self.frequency * r)
        return d

    def sdf(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        flat = torch.from_numpy(np.ascontiguousarray(p.reshape(-1, 3)))
        with torch.no_grad():
            out = self.sdf_torch(flat).numpy()
        return out.reshape(p.shape[:-1])

    def gradient(self, p) -> np.ndarray:
        """Exact SDF gradient (autograd through the closed-form expression)."""
        p = np.asarray(p, dtype=np.float64)
        flat = torch.tensor(p.reshape(-1, 3), requires_grad=True)
        (g,) = torch.autograd.grad(self.sdf_torch(flat).sum(), flat)
        return g.numpy().reshape(p.shape)

    def bounds(self) -> tuple:
        lo, hi = _node_bounds(self.root)
        return lo - abs(self.amplitude), hi + abs(self.amplitude)

    def to_dict(self) -> dict:
        return {"root": self.root, "amplitude": self.amplitude, "frequency": self.frequency,
                "center": list(self.center), "seed": self.seed, "kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticShape":
        return cls(d["root"], float(d.get("amplitude", 0.0)), float(d.get("frequency", 0.0)),
                   tuple(d.get("center", (0.0, 0.0, 0.0))), int(d.get("seed", 0)), d.get("kind", "custom"))

    def params_key(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def shape_sdf(shape: AnalyticShape, p) -> np.ndarray:
    return shape.sdf(p)


def sphere(radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> AnalyticShape:
    return AnalyticShape({"type": "sphere", "center": list(center), "radius": float(radius)}, kind="sphere")


def plane_slab(z: float = 0.0, half: float = 0.8, thickness: float = 0.6) -> AnalyticShape:
    """Flat-topped box whose front face is the plane at ``z``."""
    node = {"type": "round_box", "center": [0.0, 0.0, z - thickness / 2],
            "half": [half, half, thickness / 2], "radius": 0.0}
    return AnalyticShape(node, kind="slab")


def two_sphere_blend(k: float = 0.1) -> AnalyticShape:
    node = {"type": "smooth_union", "k": k, "children": [
        {"type": "sphere", "center": [-0.25, 0.0, 0.0], "radius": 0.35},
        {"type": "sphere", "center": [0.25, 0.0, 0.0], "radius": 0.3}]}
    return AnalyticShape(node, kind="two_sphere")


def sphere_capsule_composite() -> AnalyticShape:
    """Held-out reconstruction target: a head-like sphere on a capsule body."""
    node = {"type": "smooth_union", "k": 0.05, "children": [
        {"type": "sphere", "center": [0.0, 0.38, 0.0], "radius": 0.22},
        {"type": "capsule", "a": [0.0, 0.1, 0.0], "b": [0.0, -0.5, 0.0], "radius": 0.2}]}
    return AnalyticShape(node, kind="sphere_capsule")


# ---------------------------------------------------------------------------
# random shapes


def _split_code(split: str) -> int:
    return zlib.crc32(split.encode())


def sample_rng(seed: int, index: int, split: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) ^ int(index), _split_code(split)])


def random_shape(rng: np.random.Generator, split: str = "train") -> AnalyticShape:
    """Figure-like union of a torso, head and limbs, or a single blob."""
    r = RANGES[split]
    u = lambda lo, hi: float(rng.uniform(lo, hi))  # noqa: E731
    k = u(*r["blend"])
    amp = u(*r["amplitude"])
    freq = u(*r["frequency"])
    if rng.random() < 0.3:
        kind = "blob"
        rad = [u(0.3, 0.55), u(0.3, 0.55), u(0.25, 0.45)]
        if rng.random() < 0.5:
            rad = [rad[0]] * 3
        children = [{"type": "ellipsoid", "center": [u(-0.1, 0.1), u(-0.1, 0.1), 0.0], "radii": rad}]
        if rng.random() < 0.5:
            c = [u(-0.4, 0.4), u(-0.4, 0.4), u(-0.1, 0.1)]
            children.append({"type": "sphere", "center": c, "radius": u(0.15, 0.3)})
    else:
        kind = "figure"
        tw, th, td = u(0.15, 0.3), u(0.2, 0.35), u(0.12, 0.22)
        torso_type = rng.integers(3)
        if torso_type == 0:
            torso = {"type": "round_box", "center": [0.0, 0.0, 0.0], "half": [tw, th, td],
                     "radius": u(0.03, min(0.1, td))}
        elif torso_type == 1:
            torso = {"type": "ellipsoid", "center": [0.0, 0.0, 0.0], "radii": [tw, th, td]}
        else:
            torso = {"type": "capsule", "a": [0.0, th - tw, 0.0], "b": [0.0, -th + tw, 0.0], "radius": tw}
        children = [torso]
        hr = u(0.12, 0.2)
        children.append({"type": "sphere", "center": [u(-0.05, 0.05), th + hr * 0.9, u(-0.05, 0.05)],
                         "radius": hr})
        n_limbs = int(rng.integers(r["limbs"][0], r["limbs"][1] + 1))
        for i in range(n_limbs):
            side = 1.0 if i % 2 == 0 else -1.0
            if i < 2:
                a = [side * tw * 0.7, th * 0.7, 0.0]
                ang = u(-1.2, 0.6)
                length = u(0.3, 0.5)
                b = [a[0] + side * length * math.cos(ang), a[1] + length * math.sin(ang), u(-0.15, 0.15)]
            else:
                a = [side * tw * 0.5, -th * 0.8, 0.0]
                length = u(0.3, 0.5)
                b = [a[0] + side * u(0.0, 0.2), a[1] - length, u(-0.15, 0.15)]
            children.append({"type": "capsule", "a": a, "b": b, "radius": u(0.05, 0.09)})
    root = {"type": "smooth_union", "k": k, "children": children}
    shape = AnalyticShape(root, amp, freq, (0.0, 0.0, 0.0), 0, kind)
    lo, hi = shape.bounds()
    # recentre on x/y and fit into the allowed box
    shift = -(lo + hi) / 2
    shift[2] = 0.0
    root = _translate(root, shift)
    ext = np.maximum(np.abs(lo + shift), np.abs(hi + shift)).max()
    if ext > BOUND * 0.95:
        root = _scale(root, BOUND * 0.95 / ext)
    return AnalyticShape(root, amp, freq, (0.0, 0.0, 0.0), 0, kind)


def _translate(node: dict, t) -> dict:
    node = dict(node)
    for key in ("center", "a", "b"):
        if key in node:
            node[key] = [float(x + y) for x, y in zip(node[key], t)]
    if "children" in node:
        node["children"] = [_translate(c, t) for c in node["children"]]
    return node


def _scale(node: dict, s: float) -> dict:
    node = dict(node)
    for key in ("center", "a", "b", "half", "radii"):
        if key in node:
            node[key] = [float(x * s) for x in node[key]]
    for key in ("radius", "k"):
        if key in node:
            node[key] = float(node[key] * s)
    if "children" in node:
        node["children"] = [_scale(c, s) for c in node["children"]]
    return node


# ---------------------------------------------------------------------------
# rendering


@dataclass
class SampleTriplet:
    image: np.ndarray
    normal: NormalMap
    depth: DepthMap
    shape_id: str
    camera: OrthoCamera
    shape: AnalyticShape | None = None

    @property
    def mask(self) -> np.ndarray:
        return self.depth.mask


def sphere_trace(sdf_fn, origins: torch.Tensor, z_end: float, eps: float = HIT_EPS,
                 lipschitz: float = 1.0, max_steps: int = 2000):
    """March rays along -z from ``origins``; returns final points and hit flags."""
    p = origins.clone()
    active = torch.ones(len(p), dtype=torch.bool)
    hit = torch.zeros(len(p), dtype=torch.bool)
    for _ in range(max_steps):
        idx = torch.nonzero(active).flatten()
        if len(idx) == 0:
            break
        q = p[idx]
        d = sdf_fn(q)
        done = d.abs() < eps
        hit[idx[done]] = True
        q[:, 2] = q[:, 2] - torch.where(done, torch.zeros_like(d), d / lipschitz)
        p[idx] = q
        alive = ~done & (q[:, 2] >= z_end)
        active[idx] = alive
    return p, hit


def raycast(shape: AnalyticShape, cam: OrthoCamera, light_seed: int = 0,
            albedo=None) -> SampleTriplet:
    x, y = cam.pixel_grid()
    origins = torch.from_numpy(np.stack([x.ravel(), y.ravel(), np.full(x.size, cam.z_near)], 1))
    with torch.no_grad():
        p, hit = sphere_trace(shape.sdf_torch, origins, cam.z_far, lipschitz=shape.lipschitz)
    H, W = cam.height, cam.width
    mask = hit.numpy().reshape(H, W)
    depth = np.full((H, W), DEPTH_SENTINEL, dtype=np.float64)
    depth[mask] = p[hit, 2].numpy()
    normals = np.zeros((H, W, 3))
    if mask.any():
        ph = p[hit]
        g = torch.zeros_like(ph)
        with torch.no_grad():
            for axis in range(3):
                off = torch.zeros(3, dtype=torch.float64)
                off[axis] = NORMAL_STEP
                g[:, axis] = (shape.sdf_torch(ph + off) - shape.sdf_torch(ph - off)) / (2 * NORMAL_STEP)
        g = g / torch.linalg.norm(g, dim=-1, keepdim=True)
        normals[mask] = g.numpy()
    rng = np.random.default_rng(light_seed)
    light = rng.normal(size=3)
    light[2] = abs(light[2]) + 1.0
    light /= np.linalg.norm(light)
    if albedo is None:
        albedo = rng.uniform(0.6, 1.0, size=3)
    shade = np.clip(normals @ light, 0.0, None)
    image = shade[..., None] * np.asarray(albedo)[None, None, :]
    image = image + NOISE_LEVEL * (rng.random((H, W, 3)) - 0.5)
    image = np.clip(image, 0.0, 1.0) * mask[..., None]
    return SampleTriplet(image=image, normal=NormalMap(cam, normals, mask),
                         depth=DepthMap(cam, depth, mask), shape_id="", camera=cam, shape=shape)


def surface_points(shape: AnalyticShape, n: int, rng: np.random.Generator,
                   shell: float = 0.05, iters: int = 12) -> np.ndarray:
    """Approximately area-uniform points on the zero level set.

    Uniform samples inside a thin shell around the surface are projected
    onto it with Newton steps.
    """
    lo, hi = shape.bounds()
    lo, hi = np.maximum(lo - shell, -1.0), np.minimum(hi + shell, 1.0)
    out = []
    have = 0
    while have < n:
        cand = rng.uniform(lo, hi, size=(max(4 * n, 4096), 3))
        cand = cand[np.abs(shape.sdf(cand)) < shell]
        p = torch.from_numpy(cand)
        for _ in range(iters):
            p = p.detach().requires_grad_(True)
            d = shape.sdf_torch(p)
            (g,) = torch.autograd.grad(d.sum(), p)
            with torch.no_grad():
                p = p - (d / torch.clamp((g * g).sum(-1), min=1e-12))[:, None] * g
        p = p.detach()
        with torch.no_grad():
            ok = shape.sdf_torch(p).abs() < 1e-6
        good = p[ok].numpy()
        good = good[np.all(np.abs(good) <= 1.0, axis=1)]
        out.append(good)
        have += len(good)
    return np.concatenate(out)[:n]


# ---------------------------------------------------------------------------
# dataset files


def _dump_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def generate_sample(index: int, split: str, res: int, seed: int, half_extent: float = 1.0) -> SampleTriplet:
    rng = sample_rng(seed, index, split)
    shape = random_shape(rng, split)
    shape.seed = int(seed) ^ int(index)
    cam = OrthoCamera(res, res, half_extent)
    trip = raycast(shape, cam, light_seed=int(rng.integers(2**31)))
    trip.shape_id = f"{split}_{index:04d}"
    return trip


def write_sample(trip: SampleTriplet, out_dir) -> dict:
    sid = trip.shape_id
    names = {"id": sid, "img": f"{sid}.img.ntf", "nrm": f"{sid}.nrm.ntf",
             "dpt": f"{sid}.dpt.ntf", "shape": f"{sid}.shape.json"}
    write_ntf(os.path.join(out_dir, names["img"]), np.moveaxis(trip.image, -1, 0).astype(np.float32))
    trip.normal.save(os.path.join(out_dir, names["nrm"]))
    trip.depth.save(os.path.join(out_dir, names["dpt"]))
    _dump_json(os.path.join(out_dir, names["shape"]), trip.shape.to_dict())
    return names


def generate_dataset(count: int, split: str, res: int, seed: int, out_dir,
                     threads: int = 1, half_extent: float = 1.0) -> dict:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    ensure_dir(out_dir)
    cam = OrthoCamera(res, res, half_extent)

    def one(i):
        return write_sample(generate_sample(i, split, res, seed, half_extent), out_dir)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            entries = list(pool.map(one, range(count)))
    else:
        entries = [one(i) for i in range(count)]
    manifest = {"split": split, "count": count, "seed": int(seed), "resolution": res,
                "camera": cam.to_dict(), "generator": GENERATOR_VERSION, "samples": entries}
    _dump_json(os.path.join(out_dir, "manifest.json"), manifest)
    log.info("wrote %d %s samples to %s", count, split, out_dir)
    return manifest


class Dataset:
    """Read-side view of a generated dataset directory."""

    def __init__(self, root):
        self.root = str(root)
        with open(os.path.join(self.root, "manifest.json")) as fh:
            self.manifest = json.load(fh)
        self.camera = OrthoCamera.from_dict(self.manifest["camera"])
        self.split = self.manifest["split"]
        self._cache: dict = {}

    def __len__(self) -> int:
        return len(self.manifest["samples"])

    @property
    def ids(self) -> list:
        return [s["id"] for s in self.manifest["samples"]]

    def __getitem__(self, i: int) -> SampleTriplet:
        if i in self._cache:
            return self._cache[i]
        e = self.manifest["samples"][i]
        path = lambda k: os.path.join(self.root, e[k])  # noqa: E731
        image = np.moveaxis(read_ntf(path("img")), 0, -1).astype(np.float64)
        with open(path("shape")) as fh:
            shape = AnalyticShape.from_dict(json.load(fh))
        trip = SampleTriplet(image, NormalMap.load(path("nrm"), self.camera),
                             DepthMap.load(path("dpt"), self.camera), e["id"], self.camera, shape)
        self._cache[i] = trip
        return trip

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]
