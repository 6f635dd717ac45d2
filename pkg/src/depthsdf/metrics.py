"""Chamfer distance, point-to-surface distance and sampled IoU.

Distances are in world units (1 unit = 100 cm). Chamfer uses unsquared
nearest-neighbour distances averaged symmetrically.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud, TriMesh

UNITS = "world (1 unit = 100 cm)"
NEAR_SURFACE_SIGMA = 0.03


def _pts(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)


def chamfer(a, b) -> float:
    a, b = _pts(a), _pts(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty point clouds")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest point on triangle (a, b, c) to p, row-wise (Voronoi-region walk)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def put(sel, val):
        sel = sel & ~done
        out[sel] = val[sel] if val.ndim == 2 else val
        done[sel] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), a)
        put((d3 >= 0) & (d4 <= d3), b)
        put((d6 >= 0) & (d5 <= d6), c)
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones(len(p), bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


def point_mesh_distance(points, mesh: TriMesh, chunk: int = 200000) -> np.ndarray:
    """Exact distance from each point to the nearest triangle of ``mesh``.

    Candidates are pruned with a bound: no triangle can be closer than its
    centroid distance minus its circumradius about the centroid, and the
    nearest vertex gives an upper bound.
    """
    p = _pts(points)
    if mesh.is_empty:
        raise ValueError("mesh has no faces")
    tri = mesh.triangles()
    cent = tri.mean(1)
    rad = np.linalg.norm(tri - cent[:, None, :], axis=2).max(1)
    ub, _ = cKDTree(mesh.vertices[np.unique(mesh.faces)]).query(p)
    cand = cKDTree(cent).query_ball_point(p, ub + rad.max() + 1e-12)
    counts = np.array([len(c) for c in cand])
    pi = np.repeat(np.arange(len(p)), counts)
    ti = np.fromiter((t for c in cand for t in c), dtype=np.int64, count=counts.sum())
    best = np.full(len(p), np.inf)
    for s in range(0, len(pi), chunk):
        a_i, t_i = pi[s:s + chunk], ti[s:s + chunk]
        q = closest_point_on_triangles(p[a_i], tri[t_i, 0], tri[t_i, 1], tri[t_i, 2])
        d = np.linalg.norm(p[a_i] - q, axis=1)
        np.minimum.at(best, a_i, d)
    return best


def p2s(pred_points, gt_mesh: TriMesh) -> float:
    p = _pts(pred_points)
    if len(p) == 0:
        raise ValueError("no predicted points")
    return float(point_mesh_distance(p, gt_mesh).mean())


# ---------------------------------------------------------------------------
# inside/outside


def mesh_contains(mesh: TriMesh, points, cells: int = 64) -> np.ndarray:
    """Parity of +z ray crossings; the mesh must be closed."""
    p = _pts(points)
    if mesh.is_empty:
        return np.zeros(len(p), dtype=bool)
    tri = mesh.triangles()
    lo = np.minimum(tri.min((0, 1))[:2], p[:, :2].min(0)) - 1e-9
    hi = np.maximum(tri.max((0, 1))[:2], p[:, :2].max(0)) + 1e-9
    size = (hi - lo) / cells
    tmin = np.floor((tri[:, :, :2].min(1) - lo) / size).astype(np.int64).clip(0, cells - 1)
    tmax = np.floor((tri[:, :, :2].max(1) - lo) / size).astype(np.int64).clip(0, cells - 1)
    # bucket every triangle into each grid cell its xy bounding box covers
    span = (tmax - tmin + 1)
    reps = span[:, 0] * span[:, 1]
    t_idx = np.repeat(np.arange(len(tri)), reps)
    local = np.arange(reps.sum()) - np.repeat(np.cumsum(reps) - reps, reps)
    cx = tmin[t_idx, 0] + local // span[t_idx, 1]
    cy = tmin[t_idx, 1] + local % span[t_idx, 1]
    key = cx * cells + cy
    order = np.argsort(key, kind="stable")
    key, t_idx = key[order], t_idx[order]
    starts = np.searchsorted(key, np.arange(cells * cells))
    ends = np.searchsorted(key, np.arange(cells * cells), side="right")
    pc = np.floor((p[:, :2] - lo) / size).astype(np.int64).clip(0, cells - 1)
    pkey = pc[:, 0] * cells + pc[:, 1]
    n_c = ends[pkey] - starts[pkey]
    pi = np.repeat(np.arange(len(p)), n_c)
    off = np.arange(n_c.sum()) - np.repeat(np.cumsum(n_c) - n_c, n_c)
    ti = t_idx[starts[pkey][pi] + off]
    a, b, c = tri[ti, 0], tri[ti, 1], tri[ti, 2]
    q = p[pi]

    def edge(u, v):
        return (v[:, 0] - u[:, 0]) * (q[:, 1] - u[:, 1]) - (v[:, 1] - u[:, 1]) * (q[:, 0] - u[:, 0])

    w0, w1, w2 = edge(b, c), edge(c, a), edge(a, b)
    area = w0 + w1 + w2
    inside2d = (((w0 >= 0) & (w1 >= 0) & (w2 >= 0)) | ((w0 <= 0) & (w1 <= 0) & (w2 <= 0))) & (area != 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (w0 * a[:, 2] + w1 * b[:, 2] + w2 * c[:, 2]) / area
    crossing = inside2d & (z > q[:, 2])
    counts = np.bincount(pi[crossing], minlength=len(p))
    return counts % 2 == 1


def _inside(obj, pts) -> np.ndarray:
    if isinstance(obj, TriMesh):
        return mesh_contains(obj, pts)
    if hasattr(obj, "sdf"):
        return np.asarray(obj.sdf(pts)) < 0
    if callable(obj):
        return np.asarray(obj(pts)) < 0
    raise TypeError(f"cannot decide inside/outside for {type(obj).__name__}")


def surface_samples(obj, n: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(obj, TriMesh):
        return obj.sample_surface(n, rng)
    if hasattr(obj, "sdf_torch"):
        from .synthdata import surface_points

        return surface_points(obj, n, rng)
    raise TypeError("near-surface sampling needs a mesh or an analytic shape")


def _bounds(obj):
    if isinstance(obj, TriMesh):
        return obj.bbox()
    if hasattr(obj, "bounds"):
        return obj.bounds()
    return None


def sampling_box(*objs) -> tuple:
    """[-1,1]^3, grown to cover any object whose bounds are known."""
    lo, hi = np.full(3, -1.0), np.full(3, 1.0)
    for o in objs:
        b = _bounds(o)
        if b is not None:
            lo, hi = np.minimum(lo, b[0]), np.maximum(hi, b[1])
    return lo, hi


def iou_points(sampler: str, gt, n: int, seed: int, box=None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if sampler == "uniform":
        lo, hi = box if box is not None else sampling_box(gt)
        return rng.uniform(lo, hi, size=(n, 3))
    if sampler == "near_surface":
        return surface_samples(gt, n, rng) + rng.normal(scale=NEAR_SURFACE_SIGMA, size=(n, 3))
    raise ValueError(f"unknown sampler {sampler!r}")


def iou(a, b, sampler: str = "uniform", n: int = 200000, seed: int = 0) -> float:
    """|inside both| / |inside either| over a seeded point set; ``b`` is the reference."""
    pts = iou_points(sampler, b, n, seed, sampling_box(a, b))
    ia, ib = _inside(a, pts), _inside(b, pts)
    union = np.logical_or(ia, ib).sum()
    if union == 0:
        raise ValueError("IoU undefined: neither shape contains any sample")
    return float(np.logical_and(ia, ib).sum() / union)


def evaluate(pred: TriMesh, gt, n_surface: int = 10000, sampler: str = "uniform", n_iou: int = 200000,
             seed: int = 0, gt_mesh: TriMesh | None = None) -> dict:
    """CD, P2S and IoU of a reconstructed mesh against a mesh or analytic reference."""
    if pred.is_empty:
        raise ValueError("predicted mesh is empty")
    # same stream for both sides: identical inputs give identical samples
    pred_pts = pred.sample_surface(n_surface, np.random.default_rng(seed))
    gt_pts = surface_samples(gt, n_surface, np.random.default_rng(seed))
    if gt_mesh is None:
        if not isinstance(gt, TriMesh):
            raise ValueError("P2S needs a ground-truth mesh")
        gt_mesh = gt
    return {"cd": chamfer(pred_pts, gt_pts), "p2s": p2s(pred_pts, gt_mesh),
            "iou": iou(pred, gt, sampler, n_iou, seed), "sampler": sampler, "n": n_iou,
            "seed": seed, "units": UNITS}
