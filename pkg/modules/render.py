# modules/render.py
"""Software rendering of scenes into depth and instance-ID maps.

Triangles are projected through a pinhole camera and resolved with a z-buffer.
Depth is planar (distance along the optical axis). The per-pixel winner is the
minimum of (depth, instance_id, triangle index), which makes the result independent
of triangle order and of how the image is split into bands.
"""
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from modules import procgen
from modules.errors import ConfigurationError, ProjectionError
from modules.storage_utils import read_png, write_png

logger = logging.getLogger(__name__)

# world -> camera rotation for a camera looking straight down with image "up" = +Y
LOOK_DOWN = (1.0, 0.0, 0.0,
             0.0, -1.0, 0.0,
             0.0, 0.0, -1.0)

EDGE_EPSILON = 1e-9
CANDIDATE_BUDGET = 2_000_000
NEAR_PLANE = 1e-6

GROUND_ALBEDO = np.array([0.30, 0.24, 0.18])
MUSHROOM_ALBEDO = np.array([0.95, 0.93, 0.88])
AMBIENT = 0.15


@dataclass(frozen=True)
class CameraModel:
    position: tuple = (0.0, 0.0, 1.0)
    focal_length: float = 50.0  # mm
    sensor_width: float = 36.0  # mm
    resolution: tuple = (1920, 1080)
    rotation: tuple = LOOK_DOWN

    def __post_init__(self):
        if self.focal_length <= 0 or self.sensor_width <= 0:
            raise ConfigurationError("focal_length and sensor_width must be positive")
        width, height = self.resolution
        if int(width) != width or int(height) != height or width <= 0 or height <= 0:
            raise ConfigurationError(f"resolution must be positive integers, got {self.resolution}")
        if len(self.position) != 3 or len(self.rotation) != 9:
            raise ConfigurationError("position needs 3 values and rotation 9")

    @property
    def width(self):
        return int(self.resolution[0])

    @property
    def height(self):
        return int(self.resolution[1])

    @property
    def focal_px(self):
        return self.focal_length / self.sensor_width * self.width

    @property
    def principal_point(self):
        return self.width / 2.0, self.height / 2.0

    @property
    def rotation_matrix(self):
        return np.array(self.rotation, dtype=np.float64).reshape(3, 3)

    def to_dict(self):
        return {
            "position": list(self.position),
            "focal_length": self.focal_length,
            "sensor_width": self.sensor_width,
            "resolution": list(self.resolution),
            "rotation": list(self.rotation),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            position=tuple(float(v) for v in data["position"]),
            focal_length=float(data["focal_length"]),
            sensor_width=float(data["sensor_width"]),
            resolution=tuple(int(v) for v in data["resolution"]),
            rotation=tuple(float(v) for v in data.get("rotation", LOOK_DOWN)),
        )


def to_camera_frame(camera, points):
    points = np.asarray(points, dtype=np.float64)
    return (points - np.asarray(camera.position, dtype=np.float64)) @ camera.rotation_matrix.T


def project(camera, point):
    """Pinhole projection of one world point to continuous (x_px, y_px, depth_m)."""
    xc, yc, zc = to_camera_frame(camera, np.asarray(point, dtype=np.float64).reshape(1, 3))[0]
    if zc <= 0:
        raise ProjectionError(f"point {tuple(point)} is at or behind the camera plane (depth {zc})")
    cx, cy = camera.principal_point
    f = camera.focal_px
    return cx + f * xc / zc, cy + f * yc / zc, float(zc)


def camera_footprint(camera, depth=None):
    """Ground rectangle (x_min, y_min, x_max, y_max) seen by a look-down camera at ``depth``."""
    depth = camera.position[2] if depth is None else depth
    half_w = depth * camera.width / (2.0 * camera.focal_px)
    half_h = depth * camera.height / (2.0 * camera.focal_px)
    x, y = camera.position[0], camera.position[1]
    return x - half_w, y - half_h, x + half_w, y + half_h


@dataclass
class RenderOutput:
    depth: np.ndarray  # (H, W) float32, metres
    ids: np.ndarray  # (H, W) uint16, 0 = ground
    preview: np.ndarray = None  # (H, W, 3) uint8
    meta: dict = field(default_factory=dict)

    def save(self, directory, stem):
        """Write depth (mm), control, id and preview PNGs; returns the written paths."""
        os.makedirs(directory, exist_ok=True)
        paths = {
            "depth": os.path.join(directory, f"{stem}_depth.png"),
            "control": os.path.join(directory, f"{stem}_control.png"),
            "ids": os.path.join(directory, f"{stem}_ids.png"),
        }
        write_png(paths["depth"], depth_to_millimetres(self.depth))
        write_png(paths["control"], depth_to_control_image(self.depth))
        write_png(paths["ids"], self.ids.astype(np.uint16))
        if self.preview is not None:
            paths["preview"] = os.path.join(directory, f"{stem}_preview.png")
            write_png(paths["preview"], self.preview)
        return paths


def load_render(directory, stem):
    depth_mm = read_png(os.path.join(directory, f"{stem}_depth.png"))
    ids = read_png(os.path.join(directory, f"{stem}_ids.png"))
    preview_path = os.path.join(directory, f"{stem}_preview.png")
    preview = read_png(preview_path) if os.path.exists(preview_path) else None
    return RenderOutput(depth=(depth_mm.astype(np.float32) / np.float32(1000.0)),
                        ids=ids.astype(np.uint16), preview=preview)


def depth_to_millimetres(depth):
    return np.clip(np.round(np.asarray(depth, dtype=np.float64) * 1000.0), 0, 65535).astype(np.uint16)


def depth_to_control_image(depth):
    """Inverted min-max normalisation to 16 bits: nearest -> 65535, farthest -> 0."""
    depth = np.asarray(depth, dtype=np.float64)
    d_min, d_max = float(depth.min()), float(depth.max())
    if d_max == d_min:
        return np.zeros(depth.shape, dtype=np.uint16)
    scaled = (d_max - depth) / (d_max - d_min) * 65535.0
    return np.clip(np.round(scaled), 0, 65535).astype(np.uint16)


def pose_matrix(yaw, tilt_x, tilt_y):
    """Rz(yaw) @ Ry(tilt_y) @ Rx(tilt_x), angles in degrees."""
    a, b, c = (math.radians(v) for v in (yaw, tilt_y, tilt_x))
    rz = np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[math.cos(b), 0.0, math.sin(b)], [0.0, 1.0, 0.0], [-math.sin(b), 0.0, math.cos(b)]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, math.cos(c), -math.sin(c)], [0.0, math.sin(c), math.cos(c)]])
    return rz @ ry @ rx


@lru_cache(maxsize=8)
def cached_bank(bank_config):
    """The variant bank for a (hashable) BankConfig, built once per process."""
    return procgen.variant_bank(
        rows=bank_config.rows,
        per_row=bank_config.per_row,
        randomness=bank_config.randomness,
        master_seed=bank_config.master_seed,
        tessellation=procgen.Tessellation(bank_config.radial_segments, bank_config.axial_segments),
    )


def place_mesh(mesh, placement):
    rot = pose_matrix(placement.yaw, placement.tilt_x, placement.tilt_y)
    offset = np.array([placement.position[0], placement.position[1], 0.0])
    return mesh.vertices @ rot.T + offset


def _ground_triangles(scene):
    """Two upward-facing triangles covering the ground extents and the camera view."""
    x0, y0, x1, y1 = scene.ground
    fx0, fy0, fx1, fy1 = camera_footprint(scene.camera, scene.camera.position[2])
    pad = 0.1 * max(fx1 - fx0, fy1 - fy0)
    x0, y0 = min(x0, fx0) - pad, min(y0, fy0) - pad
    x1, y1 = max(x1, fx1) + pad, max(y1, fy1) + pad
    a, b, c, d = (x0, y0, 0.0), (x1, y0, 0.0), (x1, y1, 0.0), (x0, y1, 0.0)
    return np.array([[a, b, c], [a, c, d]], dtype=np.float64)


def scene_triangles(scene, bank):
    """World-space triangles (T, 3, 3) and their instance ids; the ground comes first with id 0."""
    tris = [_ground_triangles(scene)]
    ids = [np.zeros(2, dtype=np.int64)]
    for placement in scene.placements:
        mesh = bank[placement.variant_index]
        world = place_mesh(mesh, placement)
        tris.append(world[mesh.triangles])
        ids.append(np.full(len(mesh.triangles), placement.instance_id, dtype=np.int64))
    return np.concatenate(tris), np.concatenate(ids)


@dataclass
class _Prepared:
    x: np.ndarray  # (T, 3)
    y: np.ndarray
    inv_z: np.ndarray
    area2: np.ndarray
    ids: np.ndarray
    tri_index: np.ndarray
    i_min: np.ndarray
    i_max: np.ndarray
    j_min: np.ndarray
    j_max: np.ndarray
    shade: np.ndarray


def _prepare(camera, world, ids):
    cam_pos = np.asarray(camera.position, dtype=np.float64)
    e1 = world[:, 1] - world[:, 0]
    e2 = world[:, 2] - world[:, 0]
    normals = np.cross(e1, e2)
    to_camera = cam_pos - world.mean(axis=1)
    facing = np.einsum("ij,ij->i", normals, to_camera)

    local = to_camera_frame(camera, world.reshape(-1, 3)).reshape(-1, 3, 3)
    zc = local[..., 2]
    in_front = (zc > NEAR_PLANE).all(axis=1)
    if not in_front.all():
        logger.warning("dropping %d triangles crossing the camera plane", int((~in_front).sum()))
    keep = (facing > 0) & in_front

    tri_index = np.nonzero(keep)[0]
    local, zc = local[keep], zc[keep]
    cx, cy = camera.principal_point
    f = camera.focal_px
    x = cx + f * local[..., 0] / zc
    y = cy + f * local[..., 1] / zc
    area2 = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])

    i_min = np.clip(np.ceil(x.min(axis=1) - 0.5), 0, camera.width - 1).astype(np.int64)
    i_max = np.clip(np.floor(x.max(axis=1) - 0.5), -1, camera.width - 1).astype(np.int64)
    j_min = np.clip(np.ceil(y.min(axis=1) - 0.5), 0, camera.height - 1).astype(np.int64)
    j_max = np.clip(np.floor(y.max(axis=1) - 0.5), -1, camera.height - 1).astype(np.int64)
    # boxes entirely off-screen collapse to empty ranges
    i_max = np.where(x.min(axis=1) - 0.5 > camera.width - 1, -1, i_max)
    j_max = np.where(y.min(axis=1) - 0.5 > camera.height - 1, -1, j_max)

    n = normals[keep]
    v = to_camera[keep]
    cos = np.einsum("ij,ij->i", n, v) / (np.linalg.norm(n, axis=1) * np.linalg.norm(v, axis=1) + 1e-300)
    shade = AMBIENT + (1.0 - AMBIENT) * np.clip(cos, 0.0, 1.0)

    usable = (area2 != 0) & (i_min <= i_max) & (j_min <= j_max)
    return _Prepared(
        x=x[usable], y=y[usable], inv_z=1.0 / zc[usable], area2=area2[usable],
        ids=ids[keep][usable], tri_index=tri_index[usable],
        i_min=i_min[usable], i_max=i_max[usable], j_min=j_min[usable], j_max=j_max[usable],
        shade=shade[usable],
    )


def _rasterize_band(prep, width, row_start, row_stop):
    """Resolve all triangles for image rows [row_start, row_stop)."""
    rows = row_stop - row_start
    depth = np.full(rows * width, np.inf)
    inst = np.zeros(rows * width, dtype=np.int64)
    tri = np.full(rows * width, np.iinfo(np.int64).max, dtype=np.int64)

    j_lo = np.maximum(prep.j_min, row_start)
    j_hi = np.minimum(prep.j_max, row_stop - 1)
    active = np.nonzero(j_lo <= j_hi)[0]
    if len(active) == 0:
        return depth, inst, tri
    nx = prep.i_max[active] - prep.i_min[active] + 1
    ny = j_hi[active] - j_lo[active] + 1
    counts = nx * ny

    start = 0
    cumulative = np.cumsum(counts)
    while start < len(active):
        base = cumulative[start - 1] if start else 0
        stop = int(np.searchsorted(cumulative, base + CANDIDATE_BUDGET, side="right"))
        stop = max(stop, start + 1)
        sel = active[start:stop]
        c = counts[start:stop]
        local_tri = np.repeat(np.arange(len(sel)), c)
        offsets = np.repeat(np.cumsum(c) - c, c)
        k = np.arange(int(c.sum())) - offsets
        t = sel[local_tri]
        cols = nx[start:stop][local_tri]
        px = prep.i_min[t] + k % cols
        py = j_lo[t] + k // cols
        _resolve(prep, t, px, py, width, row_start, depth, inst, tri)
        start = stop
    return depth, inst, tri


def _resolve(prep, t, px, py, width, row_start, depth, inst, tri):
    fx = px + 0.5
    fy = py + 0.5
    x, y = prep.x[t], prep.y[t]
    area2 = prep.area2[t]
    dx, dy = fx - x[:, 0], fy - y[:, 0]
    w1 = (dx * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * dy) / area2
    w2 = ((x[:, 1] - x[:, 0]) * dy - dx * (y[:, 1] - y[:, 0])) / area2
    w0 = 1.0 - w1 - w2
    inside = (w0 >= -EDGE_EPSILON) & (w1 >= -EDGE_EPSILON) & (w2 >= -EDGE_EPSILON)
    if not inside.any():
        return
    t, px, py, w1, w2 = t[inside], px[inside], py[inside], w1[inside], w2[inside]
    inv = prep.inv_z[t]
    inv_depth = inv[:, 0] + w1 * (inv[:, 1] - inv[:, 0]) + w2 * (inv[:, 2] - inv[:, 0])
    d = 1.0 / inv_depth
    ids = prep.ids[t]
    tris = prep.tri_index[t]
    pix = (py - row_start) * width + px

    order = np.lexsort((tris, ids, d, pix))
    pix, d, ids, tris = pix[order], d[order], ids[order], tris[order]
    pix, first = np.unique(pix, return_index=True)
    d, ids, tris = d[first], ids[first], tris[first]

    bd, bi, bt = depth[pix], inst[pix], tri[pix]
    better = (d < bd) | ((d == bd) & ((ids < bi) | ((ids == bi) & (tris < bt))))
    pix = pix[better]
    depth[pix] = d[better]
    inst[pix] = ids[better]
    tri[pix] = tris[better]


def rasterize(scene, bank=None, preview=False, jobs=1, bands=None):
    """Z-buffered depth and instance-ID maps of ``scene``.

    Args:
        scene: SceneDescriptor to draw.
        bank: variant meshes indexed by ``variant_index``; rebuilt from
            ``scene.bank_config`` when omitted.
        preview: also produce a flat-shaded RGB debug image.
        jobs: threads used for image bands.
        bands: number of row bands (defaults to ``jobs``).

    Returns:
        RenderOutput
    """
    camera = scene.camera
    if bank is None:
        bank = cached_bank(scene.bank_config)
    world, ids = scene_triangles(scene, bank)
    prep = _prepare(camera, world, ids)
    width, height = camera.width, camera.height

    bands = max(1, int(bands or jobs))
    edges = np.linspace(0, height, bands + 1).round().astype(int)
    spans = [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]
    if jobs > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(lambda s: _rasterize_band(prep, width, *s), spans))
    else:
        parts = [_rasterize_band(prep, width, *s) for s in spans]

    depth = np.concatenate([p[0] for p in parts]).reshape(height, width)
    inst = np.concatenate([p[1] for p in parts]).reshape(height, width)
    tri = np.concatenate([p[2] for p in parts]).reshape(height, width)

    if not np.isfinite(depth).all():
        logger.warning("%d pixels received no surface", int((~np.isfinite(depth)).sum()))
        depth = np.where(np.isfinite(depth), depth, camera.position[2])

    if inst.max(initial=0) > np.iinfo(np.uint16).max:
        raise ConfigurationError("instance ids exceed the 16-bit id map range")

    out = RenderOutput(depth=depth.astype(np.float32), ids=inst.astype(np.uint16),
                       meta={"triangles": int(len(world)), "drawn": int(len(prep.ids))})
    if preview:
        out.preview = _shade(prep, tri, inst)
    return out


def _shade(prep, tri, inst):
    lookup = np.full(int(prep.tri_index.max(initial=0)) + 1, AMBIENT)
    lookup[prep.tri_index] = prep.shade
    valid = tri != np.iinfo(np.int64).max
    shade = np.where(valid, lookup[np.where(valid, tri, 0)], AMBIENT)
    albedo = np.where((inst > 0)[..., None], MUSHROOM_ALBEDO, GROUND_ALBEDO)
    return np.clip(np.round(albedo * shade[..., None] * 255.0), 0, 255).astype(np.uint8)


@dataclass
class InstanceMask:
    instance_id: int
    bbox: tuple  # (x, y, w, h) pixels
    area: int
    mask: np.ndarray  # bbox-local boolean mask

    def full_mask(self, shape):
        full = np.zeros(shape, dtype=bool)
        x, y, w, h = self.bbox
        full[y:y + h, x:x + w] = self.mask
        return full


def extract_masks(id_map):
    """Per-instance masks of an id map, sorted by instance id; background and absent ids omitted."""
    id_map = np.asarray(id_map)
    rows, cols = np.nonzero(id_map)
    if len(rows) == 0:
        return []
    values = id_map[rows, cols].astype(np.int64)
    order = np.argsort(values, kind="stable")
    values, rows, cols = values[order], rows[order], cols[order]
    unique, starts, counts = np.unique(values, return_index=True, return_counts=True)

    masks = []
    for inst_id, s, n in zip(unique, starts, counts):
        r = rows[s:s + n]
        c = cols[s:s + n]
        y0, x0 = int(r.min()), int(c.min())
        h, w = int(r.max()) - y0 + 1, int(c.max()) - x0 + 1
        local = np.zeros((h, w), dtype=bool)
        local[r - y0, c - x0] = True
        masks.append(InstanceMask(int(inst_id), (x0, y0, w, h), int(n), local))
    return masks
