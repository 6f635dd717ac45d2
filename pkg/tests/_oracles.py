"""Independent reference implementations used by the tests."""

import math

import numpy as np
import torch


def rel_err(a, b, floor: float = 1e-6) -> float:
    """||a-b|| / max(||a||, ||b||, floor); the floor covers gradients that are exactly zero."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def fd_grad(fn, tensor: torch.Tensor, step: float = 1e-5, max_entries: int | None = None, seed: int = 0):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor`` (modified in place).

    Returns (flat indices probed, numeric gradient at those indices).
    """
    flat = tensor.data.view(-1)
    idx = np.arange(flat.numel())
    if max_entries is not None and len(idx) > max_entries:
        idx = np.sort(np.random.default_rng(seed).choice(len(idx), max_entries, replace=False))
    out = np.empty(len(idx))
    with torch.no_grad():
        for j, i in enumerate(idx):
            old = flat[i].item()
            flat[i] = old + step
            hi = float(fn())
            flat[i] = old - step
            lo = float(fn())
            flat[i] = old
            out[j] = (hi - lo) / (2 * step)
    return idx, out


def check_grads(fn, params: dict, step: float = 1e-5, max_entries: int = 40) -> float:
    """Worst relative error between autograd and central differences over ``params``."""
    for p in params.values():
        p.requires_grad_(True)
        p.grad = None
    out = fn()
    grads = torch.autograd.grad(out, list(params.values()), allow_unused=True)
    worst = 0.0
    for (name, p), g in zip(params.items(), grads):
        g = torch.zeros_like(p) if g is None else g
        idx, num = fd_grad(fn, p, step, max_entries)
        worst = max(worst, rel_err(g.detach().reshape(-1)[idx].numpy(), num))
    return worst


# ---- scalar loss loops -------------------------------------------------------


def loop_normal_loss(pred, gt, mask, lc=1.25, ln=1.0):
    ang = l1 = 0.0
    count = 0
    H, W = mask.shape
    for v in range(H):
        for u in range(W):
            if not mask[v, u]:
                continue
            p, g = pred[v, u], gt[v, u]
            pn = p / math.sqrt(sum(x * x for x in p) + 1e-8)
            gn = g / math.sqrt(sum(x * x for x in g) + 1e-8)
            c = sum(a * b for a, b in zip(pn, gn))
            c = min(max(c, -1 + 1e-7), 1 - 1e-7)
            ang += math.acos(c)
            l1 += sum(abs(a - b) for a, b in zip(g, p)) / 3
            count += 1
    return lc * ang / count + ln * l1 / count


def loop_depth_loss(pred, gt, mask):
    tot, n = 0.0, 0
    for v in range(mask.shape[0]):
        for u in range(mask.shape[1]):
            if mask[v, u]:
                tot += abs(gt[v, u] - pred[v, u])
                n += 1
    return tot / n


def loop_volume_loss(pred, label, lam):
    a = b = 0.0
    for s, t in zip(pred, label):
        e = abs(s - t)
        a += e
        if s * t < 0:
            b += e
    return a / len(pred) + lam * b / len(pred)


def loop_surface_loss(r, e, valid):
    tot, n = 0.0, 0
    for a, b, ok in zip(np.ravel(r), np.ravel(e), np.ravel(valid)):
        if ok:
            tot += (a - b) ** 2
            n += 1
    return tot / n


# ---- geometry -----------------------------------------------------------------


def brute_chamfer(a, b):
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    return 0.5 * (d.min(1).mean() + d.min(0).mean())


def _seg_dist(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-300), 0.0, 1.0)
    return np.linalg.norm(p - (a + t * ab))


def point_triangle_distance(p, a, b, c):
    """Distance via plane projection plus the three edges (independent of the Voronoi walk)."""
    n = np.cross(b - a, c - a)
    nn = np.linalg.norm(n)
    best = min(_seg_dist(p, a, b), _seg_dist(p, b, c), _seg_dist(p, c, a))
    if nn > 0:
        n = n / nn
        q = p - np.dot(p - a, n) * n
        # barycentric inside test
        s0 = np.dot(np.cross(b - a, q - a), n)
        s1 = np.dot(np.cross(c - b, q - b), n)
        s2 = np.dot(np.cross(a - c, q - c), n)
        if (s0 >= 0 and s1 >= 0 and s2 >= 0) or (s0 <= 0 and s1 <= 0 and s2 <= 0):
            best = min(best, abs(np.dot(p - a, n)))
    return best


def brute_p2s(points, vertices, faces):
    tri = vertices[faces]
    return float(np.mean([min(point_triangle_distance(p, *t) for t in tri) for p in points]))


def icosphere(radius=1.0, subdiv=4):
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
         (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4), (11, 10, 2),
         (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5), (2, 4, 11),
         (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(x, float) / np.linalg.norm(x) for x in v]
    faces = f
    for _ in range(subdiv):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts) * radius, np.array(faces, dtype=np.int64)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
