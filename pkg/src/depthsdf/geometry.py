"""Orthographic camera, raster/point/mesh containers and their file formats."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .diffcore import read_ntf, write_ntf

Z_NEAR = 1.0
Z_FAR = -1.0
# background value stored in depth rasters; never read at mask=0
DEPTH_SENTINEL = Z_FAR


@dataclass(frozen=True)
class OrthoCamera:
    """Camera on +z looking down -z; the image spans [-half_extent, half_extent]^2.

    Pixel (u, v) has its center at integer coordinates, row 0 at the top.
    """

    width: int
    height: int
    half_extent: float = 1.0
    z_near: float = Z_NEAR
    z_far: float = Z_FAR

    def pixel_to_world(self, u, v):
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        x = self.half_extent * (2.0 * (u + 0.5) / self.width - 1.0)
        y = self.half_extent * (1.0 - 2.0 * (v + 0.5) / self.height)
        return x, y

    def world_to_pixel(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        u = (x / self.half_extent + 1.0) * self.width / 2.0 - 0.5
        v = (1.0 - y / self.half_extent) * self.height / 2.0 - 0.5
        return u, v

    def pixel_grid(self):
        """World (x, y) of every pixel center, each H x W."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        return self.pixel_to_world(u, v)

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "half_extent": self.half_extent,
                "z_near": self.z_near, "z_far": self.z_far}

    @classmethod
    def from_dict(cls, d: dict) -> "OrthoCamera":
        return cls(int(d["width"]), int(d["height"]), float(d.get("half_extent", 1.0)),
                   float(d.get("z_near", Z_NEAR)), float(d.get("z_far", Z_FAR)))


def project(cam: OrthoCamera, p) -> tuple:
    """Continuous pixel coordinates and depth of point(s) ``p`` (..., 3)."""
    p = np.asarray(p, dtype=np.float64)
    u, v = cam.world_to_pixel(p[..., 0], p[..., 1])
    return u, v, p[..., 2].copy()


@dataclass
class DepthMap:
    camera: OrthoCamera
    depth: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth)
        self.mask = np.asarray(self.mask).astype(bool)
        shape = (self.camera.height, self.camera.width)
        if self.depth.shape != shape or self.mask.shape != shape:
            raise ValueError(f"depth/mask must be {shape}")

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def in_range(self) -> bool:
        d = self.depth[self.mask]
        return bool(np.all((d <= self.camera.z_near) & (d >= self.camera.z_far)))

    def save(self, path) -> None:
        write_ntf(path, np.stack([self.depth, self.mask]).astype(np.float32))

    @classmethod
    def load(cls, path, camera: OrthoCamera) -> "DepthMap":
        a = read_ntf(path)
        return cls(camera, a[0], a[1] > 0.5)


@dataclass
class NormalMap:
    camera: OrthoCamera
    normals: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.normals = np.asarray(self.normals)
        self.mask = np.asarray(self.mask).astype(bool)
        if self.normals.shape != (self.camera.height, self.camera.width, 3):
            raise ValueError("normals must be H x W x 3")

    def save(self, path) -> None:
        a = np.concatenate([np.moveaxis(self.normals, -1, 0), self.mask[None]], 0)
        write_ntf(path, a.astype(np.float32))

    @classmethod
    def load(cls, path, camera: OrthoCamera) -> "NormalMap":
        a = read_ntf(path)
        return cls(camera, np.moveaxis(a[:3], 0, -1), a[3] > 0.5)


@dataclass
class PointCloud:
    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def edge_use_counts(self) -> dict:
        """Undirected edge -> number of faces using it."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return {tuple(k): int(c) for k, c in zip(uniq, counts)}

    def is_watertight(self) -> bool:
        if self.is_empty:
            return False
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        _, counts = np.unique(np.sort(e, axis=1), axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def bbox(self) -> tuple:
        if len(self.vertices) == 0:
            return None
        return self.vertices.min(0), self.vertices.max(0)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Area-weighted uniform samples on the triangles."""
        areas = self.face_areas()
        idx = rng.choice(len(areas), size=n, p=areas / areas.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        t = self.triangles()[idx]
        return ((1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1]
                + (r1 * r2)[:, None] * t[:, 2])

    def save_obj(self, path) -> None:
        with open(path, "w") as fh:
            for v in self.vertices:
                fh.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}\n")
            for f in self.faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")

    @classmethod
    def load_obj(cls, path) -> "TriMesh":
        verts, faces = [], []
        with open(path) as fh:
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
        return cls(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def back_project(dm: DepthMap) -> PointCloud:
    """One world point per foreground pixel, in row-major pixel order."""
    if dm.count == 0:
        raise ValueError("depth map has an empty foreground mask")
    v, u = np.nonzero(dm.mask)
    x, y = dm.camera.pixel_to_world(u, v)
    pts = np.stack([x, y, dm.depth[v, u].astype(np.float64)], axis=1)
    return PointCloud(pts, labels=np.stack([u, v], axis=1))


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return str(path)
