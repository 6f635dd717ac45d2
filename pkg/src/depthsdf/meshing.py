"""Dense SDF grids over [-1,1]^3 and marching-cubes extraction."""

from __future__ import annotations

import logging
import os

import numpy as np

from ._mc_tables import CORNERS, EDGES, TRIANGLES
from .geometry import TriMesh

log = logging.getLogger(__name__)

_CORNERS = np.array(CORNERS, dtype=np.int64)
_EDGES = np.array(EDGES, dtype=np.int64)
_TRI = np.array(TRIANGLES, dtype=np.int64)
_TRI_COUNT = (_TRI >= 0).sum(1) // 3
# axis along which each cube edge runs and its lower corner offset
_EDGE_AXIS = np.argmax(np.abs(_CORNERS[_EDGES[:, 1]] - _CORNERS[_EDGES[:, 0]]), axis=1)
_EDGE_BASE = np.minimum(_CORNERS[_EDGES[:, 0]], _CORNERS[_EDGES[:, 1]])


def lattice(resolution: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    if resolution < 2:
        raise ValueError("grid resolution must be at least 2")
    return np.linspace(lo, hi, resolution)


def grid_points(resolution: int) -> np.ndarray:
    """(R^3, 3) lattice points in C order, matching ``grid[i, j, k]``."""
    t = lattice(resolution)
    x, y, z = np.meshgrid(t, t, t, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), z.ravel()], 1)


def eval_grid(sdf_fn, resolution: int, chunk: int = 131072) -> np.ndarray:
    """R x R x R grid of ``sdf_fn`` (N,3 -> N) over [-1,1]^3, evaluated chunk by chunk."""
    pts = grid_points(resolution)
    out = np.empty(len(pts), dtype=np.float64)
    step = chunk if chunk else len(pts)
    for s in range(0, len(pts), step):
        out[s:s + step] = sdf_fn(pts[s:s + step])
    return out.reshape(resolution, resolution, resolution)


def field_grid(field, cond, resolution: int, chunk: int = 131072) -> np.ndarray:
    """Grid of a learned implicit field; the conditioning is encoded once."""
    from .pifu import eval_sdf
    import torch

    with torch.no_grad():
        fm = field.encode(cond)
    return eval_grid(lambda p: eval_sdf(field, None, p, features=fm, chunk=chunk), resolution, chunk)


def marching_cubes(grid: np.ndarray, level: float = 0.0, lo: float = -1.0, hi: float = 1.0) -> TriMesh:
    """Triangulate the ``level`` set of a node-sampled grid spanning [lo, hi]^3.

    Vertices are shared between neighbouring cells (one per crossed lattice
    edge); faces wind counter-clockwise seen from the side with values above
    ``level``.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 3 or min(g.shape) < 2:
        raise ValueError("grid must be 3-D with at least 2 nodes per axis")
    if not np.all(np.isfinite(g)):
        raise ValueError("grid contains non-finite values")
    # a node exactly on the level would put several vertices at one point
    g = np.where(g == level, level + 1e-12 * max(1.0, abs(level)), g)
    nx, ny, nz = g.shape
    inside = g < level
    cube = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for bit, (dx, dy, dz) in enumerate(_CORNERS):
        cube |= inside[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz].astype(np.int64) << bit
    cells = np.nonzero((cube != 0) & (cube != 255))
    if len(cells[0]) == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    cidx = np.stack(cells, 1)
    case = cube[cells]
    ntri = _TRI_COUNT[case]
    cell_rep = np.repeat(np.arange(len(case)), ntri)
    tri_slot = np.arange(ntri.sum()) - np.repeat(np.cumsum(ntri) - ntri, ntri)
    rows = _TRI[case[cell_rep]]
    edges = np.stack([rows[np.arange(len(rows)), 3 * tri_slot + k] for k in range(3)], 1)
    # global id of each lattice edge: (lower node linear index) * 3 + axis
    base = cidx[cell_rep][:, None, :] + _EDGE_BASE[edges]
    node = (base[..., 0] * ny + base[..., 1]) * nz + base[..., 2]
    gid = node * 3 + _EDGE_AXIS[edges]
    uniq, faces = np.unique(gid.ravel(), return_inverse=True)
    faces = faces.reshape(-1, 3)
    axis = uniq % 3
    n0 = uniq // 3
    i0 = np.stack([n0 // (ny * nz), (n0 // nz) % ny, n0 % nz], 1)
    i1 = i0 + np.eye(3, dtype=np.int64)[axis]
    v0 = g[i0[:, 0], i0[:, 1], i0[:, 2]]
    v1 = g[i1[:, 0], i1[:, 1], i1[:, 2]]
    t = (level - v0) / (v1 - v0)
    pos = i0 + t[:, None] * (i1 - i0)
    scale = (hi - lo) / (np.array(g.shape) - 1)
    verts = lo + pos * scale
    # the table winds faces toward the inside; flip to face the positive side
    faces = faces[:, ::-1].copy()
    return TriMesh(verts, faces)


def trilinear(grid: np.ndarray, pts: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Trilinear interpolation of a node grid at world points."""
    g = np.asarray(grid, dtype=np.float64)
    shape = np.array(g.shape)
    f = (np.asarray(pts) - lo) / (hi - lo) * (shape - 1)
    i = np.clip(np.floor(f).astype(np.int64), 0, shape - 2)
    t = f - i
    out = np.zeros(len(f))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((t[:, 0] if dx else 1 - t[:, 0]) * (t[:, 1] if dy else 1 - t[:, 1])
                     * (t[:, 2] if dz else 1 - t[:, 2]))
                out += w * g[i[:, 0] + dx, i[:, 1] + dy, i[:, 2] + dz]
    return out


def mesh_stats(mesh: TriMesh) -> dict:
    bb = mesh.bbox()
    return {"vertices": int(len(mesh.vertices)), "faces": int(len(mesh.faces)),
            "bbox": None if bb is None else [bb[0].tolist(), bb[1].tolist()],
            "watertight": mesh.is_watertight()}


def reconstruct(field, cond, resolution: int = 128, out_path=None, mask=None) -> tuple:
    """Encode, evaluate the grid, extract the zero level set and optionally write an OBJ."""
    if mask is not None and not np.asarray(mask).any():
        raise ValueError("empty foreground mask: nothing to reconstruct")
    grid = field_grid(field, cond, resolution)
    mesh = marching_cubes(grid, 0.0)
    if out_path is not None:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        mesh.save_obj(out_path)
    stats = mesh_stats(mesh)
    log.info("reconstructed mesh %s", stats)
    return mesh, stats
