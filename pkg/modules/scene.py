# modules/scene.py
"""Randomised mushroom-bed scenes.

A scene is a pure function of ``(scene_seed, SceneConfig)``: Poisson-disk positions
on the ground, a bank variant and pose per position, and a camera 1 m above the
region centre looking straight down.
"""
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from modules.errors import ConfigurationError, StorageError
from modules.render import CameraModel
from modules.storage_utils import dumps_json, read_json, write_json
from utils import STREAM_PLACEMENT, STREAM_POISSON, STREAM_SCENE, SeedStream, check_seed, derive_seed

logger = logging.getLogger(__name__)

SCENE_SCHEMA_VERSION = 1

# calibrated so the default camera sees about 145 instances per render
DEFAULT_MIN_DISTANCE = 0.037
BRIDSON_ATTEMPTS = 30
MAX_TILT = 10.0


@dataclass(frozen=True)
class Region:
    x_min: float = -0.5
    y_min: float = -0.4
    x_max: float = 0.5
    y_max: float = 0.4

    def __post_init__(self):
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ConfigurationError(f"region bounds are inverted: {self.bounds}")

    @property
    def bounds(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def contains(self, x, y):
        return self.x_min <= x < self.x_max and self.y_min <= y < self.y_max

    @classmethod
    def sized(cls, width, height):
        """A region of the given size centred on the origin."""
        return cls(-width / 2.0, -height / 2.0, width / 2.0, height / 2.0)


@dataclass(frozen=True)
class SamplingConfig:
    region: Region = field(default_factory=Region)
    min_distance: float = DEFAULT_MIN_DISTANCE
    seed: int = 0
    max_attempts_per_point: int = BRIDSON_ATTEMPTS

    def __post_init__(self):
        if not self.min_distance > 0:
            raise ConfigurationError(f"min_distance must be positive, got {self.min_distance}")
        if self.max_attempts_per_point < 1:
            raise ConfigurationError("max_attempts_per_point must be at least 1")
        check_seed(self.seed)


@dataclass(frozen=True)
class BankConfig:
    rows: int = 4
    per_row: int = 20
    randomness: float = 0.25
    master_seed: int = 0
    radial_segments: int = 32
    axial_segments: int = 24

    @property
    def size(self):
        return self.rows * self.per_row

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(frozen=True)
class SceneConfig:
    region: Region = field(default_factory=Region)
    min_distance: float = DEFAULT_MIN_DISTANCE
    max_attempts_per_point: int = BRIDSON_ATTEMPTS
    max_tilt: float = MAX_TILT
    bank: BankConfig = field(default_factory=BankConfig)
    camera: CameraModel = field(default_factory=CameraModel)


@dataclass(frozen=True)
class InstancePlacement:
    instance_id: int
    variant_index: int
    position: tuple
    yaw: float
    tilt_x: float
    tilt_y: float

    def to_dict(self):
        return {
            "instance_id": self.instance_id,
            "variant_index": self.variant_index,
            "position": list(self.position),
            "yaw": self.yaw,
            "tilt_x": self.tilt_x,
            "tilt_y": self.tilt_y,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            instance_id=int(data["instance_id"]),
            variant_index=int(data["variant_index"]),
            position=tuple(float(v) for v in data["position"]),
            yaw=float(data["yaw"]),
            tilt_x=float(data["tilt_x"]),
            tilt_y=float(data["tilt_y"]),
        )


@dataclass
class SceneDescriptor:
    seed: int
    placements: list
    ground: tuple  # (x_min, y_min, x_max, y_max) of the plane z = 0
    camera: CameraModel
    bank_config: BankConfig

    def to_dict(self):
        return {
            "version": SCENE_SCHEMA_VERSION,
            "seed": self.seed,
            "ground": {"z": 0.0, "extents": list(self.ground)},
            "camera": self.camera.to_dict(),
            "bank_config": self.bank_config.to_dict(),
            "placements": [p.to_dict() for p in self.placements],
        }

    def to_json(self):
        return dumps_json(self.to_dict())

    @classmethod
    def from_dict(cls, data):
        version = data.get("version")
        if version != SCENE_SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported scene schema version {version!r}")
        return cls(
            seed=check_seed(data["seed"]),
            placements=[InstancePlacement.from_dict(p) for p in data["placements"]],
            ground=tuple(float(v) for v in data["ground"]["extents"]),
            camera=CameraModel.from_dict(data["camera"]),
            bank_config=BankConfig.from_dict(data["bank_config"]),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def poisson_disk_sample(config):
    """Bridson's grid-accelerated Poisson-disk sampling.

    Candidates are drawn uniformly by area from the annulus [r, 2r] around a random
    active point; a point retires after ``max_attempts_per_point`` misses.
    """
    region = config.region
    r = config.min_distance
    if region.width <= 0 or region.height <= 0:
        return []
    rng = SeedStream(config.seed, STREAM_POISSON).rng

    cell = r / math.sqrt(2.0)
    nx = max(1, math.ceil(region.width / cell))
    ny = max(1, math.ceil(region.height / cell))
    grid = np.full((ny, nx), -1, dtype=np.int64)
    r2 = r * r

    def cell_of(x, y):
        return (min(int((y - region.y_min) / cell), ny - 1), min(int((x - region.x_min) / cell), nx - 1))

    def far_enough(x, y):
        gy, gx = cell_of(x, y)
        for j in range(max(gy - 2, 0), min(gy + 3, ny)):
            for i in range(max(gx - 2, 0), min(gx + 3, nx)):
                k = grid[j, i]
                if k >= 0:
                    qx, qy = points[k]
                    if (qx - x) ** 2 + (qy - y) ** 2 < r2:
                        return False
        return True

    points = []
    x0 = region.x_min + rng.uniform() * region.width
    y0 = region.y_min + rng.uniform() * region.height
    points.append((x0, y0))
    grid[cell_of(x0, y0)] = 0
    active = [0]

    while active:
        slot = int(rng.integers(len(active)))
        px, py = points[active[slot]]
        placed = False
        for _ in range(config.max_attempts_per_point):
            rho = math.sqrt(rng.uniform(r2, 4.0 * r2))
            theta = rng.uniform(0.0, 2.0 * math.pi)
            x, y = px + rho * math.cos(theta), py + rho * math.sin(theta)
            if region.contains(x, y) and far_enough(x, y):
                points.append((x, y))
                grid[cell_of(x, y)] = len(points) - 1
                active.append(len(points) - 1)
                placed = True
                break
        if not placed:
            active[slot] = active[-1]
            active.pop()

    logger.debug("poisson sample seed=%d r=%s points=%d", config.seed, r, len(points))
    return points


def place_instances(points, bank_size, seed, max_tilt=MAX_TILT):
    """One placement per point with uniform variant, yaw in [0, 360) and tilts in [-max_tilt, max_tilt]."""
    if bank_size < 1:
        raise ConfigurationError(f"bank_size must be at least 1, got {bank_size}")
    n = len(points)
    if n == 0:
        return []
    rng = SeedStream(seed, STREAM_PLACEMENT).rng
    variants = rng.integers(0, bank_size, size=n)
    yaws = rng.uniform(0.0, 360.0, size=n)
    yaws = np.where(yaws >= 360.0, 0.0, yaws)
    tilts = rng.uniform(-max_tilt, max_tilt, size=(n, 2))
    return [
        InstancePlacement(
            instance_id=i + 1,
            variant_index=int(variants[i]),
            position=(float(points[i][0]), float(points[i][1])),
            yaw=float(yaws[i]),
            tilt_x=float(tilts[i, 0]),
            tilt_y=float(tilts[i, 1]),
        )
        for i in range(n)
    ]


def canonical_order(placements):
    """Sort by (y, x, variant) and renumber instance ids densely from 1."""
    ordered = sorted(placements, key=lambda p: (p.position[1], p.position[0], p.variant_index))
    return [replace(p, instance_id=i + 1) for i, p in enumerate(ordered)]


def build_scene(scene_seed, config=None):
    config = config or SceneConfig()
    scene_seed = check_seed(scene_seed)
    sampling = SamplingConfig(config.region, config.min_distance, scene_seed, config.max_attempts_per_point)
    points = poisson_disk_sample(sampling)
    placements = canonical_order(place_instances(points, config.bank.size, scene_seed, config.max_tilt))

    cx, cy = config.region.center
    camera = replace(config.camera, position=(cx, cy, config.camera.position[2]))
    return SceneDescriptor(
        seed=scene_seed,
        placements=placements,
        ground=config.region.bounds,
        camera=camera,
        bank_config=config.bank,
    )


def scene_seeds(master_seed, count):
    return [derive_seed(master_seed, STREAM_SCENE, i) for i in range(count)]


def scene_filename(seed):
    return f"scene_{seed}.json"


def save_scene(scene, directory):
    return write_json(os.path.join(directory, scene_filename(scene.seed)), scene.to_dict())


def load_scene(path):
    try:
        return SceneDescriptor.from_dict(read_json(path))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ConfigurationError):
            raise
        raise StorageError(f"malformed scene file {path}: {e}") from e
