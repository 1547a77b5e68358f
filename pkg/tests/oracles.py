# tests/oracles.py
"""Slow, obviously-correct reference implementations used only by the tests."""
import itertools
import math

import numpy as np

from modules import render


def ray_cast(scene, bank):
    """Depth and id maps by intersecting one ray per pixel centre with every triangle.

    Rays are scaled so their camera-space z component is 1, so the hit parameter
    is the planar depth. No back-face culling: closed meshes hide their back faces.
    """
    camera = scene.camera
    world, ids = render.scene_triangles(scene, bank)
    width, height = camera.width, camera.height
    f = camera.focal_px
    cx, cy = camera.principal_point
    jj, ii = np.mgrid[0:height, 0:width]
    dirs_cam = np.stack([(ii + 0.5 - cx) / f, (jj + 0.5 - cy) / f, np.ones((height, width))], axis=-1)
    dirs = dirs_cam.reshape(-1, 3) @ camera.rotation_matrix
    origin = np.asarray(camera.position, dtype=np.float64)

    depth = np.full(width * height, np.inf)
    inst = np.zeros(width * height, dtype=np.int64)
    for tri, tid in zip(world, ids):
        v0, v1, v2 = tri
        e1, e2 = v1 - v0, v2 - v0
        p = np.cross(dirs, e2)
        det = p @ e1
        ok = np.abs(det) > 1e-18
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = origin - v0
        u = (p @ s) * inv
        q = np.cross(s, e1)
        v = (dirs @ q) * inv
        t = float(e2 @ q) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        closer = hit & ((t < depth) | ((t == depth) & (tid < inst)))
        depth[closer] = t[closer]
        inst[closer] = tid
    return depth.reshape(height, width), inst.reshape(height, width)


def optimal_match_count(ious, threshold):
    """Largest number of one-to-one (pred, gt) pairs with IoU >= threshold, by exhaustion."""
    n_pred, n_gt = ious.shape
    for k in range(min(n_pred, n_gt), 0, -1):
        for preds in itertools.combinations(range(n_pred), k):
            for gts in itertools.permutations(range(n_gt), k):
                if all(ious[p, g] >= threshold for p, g in zip(preds, gts)):
                    return k
    return 0


def dart_throwing(width, height, r, seed, attempts=20000):
    """Naive rejection sampling: uniform darts kept when at least r from every kept dart."""
    rng = np.random.default_rng(seed)
    points = []
    for _ in range(attempts):
        x, y = rng.uniform(0, width), rng.uniform(0, height)
        if all((x - px) ** 2 + (y - py) ** 2 >= r * r for px, py in points):
            points.append((x, y))
    return points


def min_pairwise_distance(points):
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        return math.inf
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1))
    np.fill_diagonal(d, np.inf)
    return float(d.min())


def box_mask(shape, rows, cols):
    """Boolean mask with the inclusive row and column ranges set."""
    mask = np.zeros(shape, dtype=bool)
    mask[rows[0]:rows[1] + 1, cols[0]:cols[1] + 1] = True
    return mask
