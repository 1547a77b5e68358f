# modules/procgen.py
"""Procedural mushroom meshes.

A mushroom is a closed surface of revolution around +Z with the stem base at the
origin. Its profile runs from the bottom pole up a tapered stem, out along a flat
cap underside (no gills), and over the cap to the apex pole. The cap top blends a
hemisphere with a flattened paraboloid.

Size follows age linearly (``cap_diameter = 30 mm * age``); proportions do not
depend on age. Randomness perturbs stem length, cap eccentricity and the profile
blend, each by at most ``randomness`` times its configured maximum.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from modules.errors import ConfigurationError, DomainError
from utils import STREAM_ROW, STREAM_SHAPE, SeedStream, check_seed

logger = logging.getLogger(__name__)

MIN_AGE = 0.05
MAX_AGE = 1.0
DIAMETER_PER_AGE_MM = 30.0

# deviation maxima at randomness = 1, relative to the nominal value
STEM_LENGTH_DEVIATION = 0.30
CAP_ECCENTRICITY_DEVIATION = 0.15
PROFILE_BLEND_DEVIATION = 0.20

# nominal proportions, relative to the cap radius
STEM_HEIGHT_RATIO = 0.55
STEM_RADIUS_RATIO = 0.38
STEM_TAPER = 0.9
CAP_HEIGHT_RATIO = 0.7
PROFILE_BLEND = 0.5

MIN_RADIAL_SEGMENTS = 8
MIN_AXIAL_SEGMENTS = 4


@dataclass(frozen=True)
class MushroomParams:
    age: float
    age_increment: float = 0.0
    randomness: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not MIN_AGE <= self.age <= MAX_AGE:
            raise DomainError(f"age must lie in [{MIN_AGE}, {MAX_AGE}], got {self.age}")
        if not 0.0 <= self.age_increment <= 1.0:
            raise DomainError(f"age_increment must lie in [0, 1], got {self.age_increment}")
        if not 0.0 <= self.randomness <= 1.0:
            raise DomainError(f"randomness must lie in [0, 1], got {self.randomness}")
        try:
            check_seed(self.seed)
        except ValueError as exc:
            raise DomainError(str(exc)) from exc

    def with_age(self, age):
        return MushroomParams(age, self.age_increment, self.randomness, self.seed)

    def to_dict(self):
        return {
            "age": self.age,
            "age_increment": self.age_increment,
            "randomness": self.randomness,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class Tessellation:
    radial: int = 32
    axial: int = 24

    def __post_init__(self):
        if int(self.radial) != self.radial or self.radial < MIN_RADIAL_SEGMENTS:
            raise ConfigurationError(
                f"tessellation needs at least {MIN_RADIAL_SEGMENTS} radial segments, got {self.radial}")
        if int(self.axial) != self.axial or self.axial < MIN_AXIAL_SEGMENTS:
            raise ConfigurationError(
                f"tessellation needs at least {MIN_AXIAL_SEGMENTS} axial segments, got {self.axial}")

    @property
    def stem_segments(self):
        return max(1, self.axial // 4)

    @property
    def cap_segments(self):
        # one axial segment is spent on the flat underside
        return self.axial - self.stem_segments - 1


@dataclass(frozen=True)
class ShapeConfig:
    stem_length_deviation: float = STEM_LENGTH_DEVIATION
    cap_eccentricity_deviation: float = CAP_ECCENTRICITY_DEVIATION
    profile_blend_deviation: float = PROFILE_BLEND_DEVIATION
    stem_height_ratio: float = STEM_HEIGHT_RATIO
    stem_radius_ratio: float = STEM_RADIUS_RATIO
    stem_taper: float = STEM_TAPER
    cap_height_ratio: float = CAP_HEIGHT_RATIO
    profile_blend: float = PROFILE_BLEND

    def __post_init__(self):
        if not 0.0 < self.stem_radius_ratio < 1.0:
            raise ConfigurationError("stem_radius_ratio must lie in (0, 1)")
        if not 0.0 < self.stem_taper <= 1.0:
            raise ConfigurationError("stem_taper must lie in (0, 1]")
        if self.stem_height_ratio <= 0 or self.cap_height_ratio <= 0:
            raise ConfigurationError("stem and cap height ratios must be positive")
        if not 0.0 <= self.profile_blend <= 1.0:
            raise ConfigurationError("profile_blend must lie in [0, 1]")
        if not 0.0 <= self.stem_length_deviation < 1.0:
            raise ConfigurationError("stem_length_deviation must lie in [0, 1)")
        if not 0.0 <= self.cap_eccentricity_deviation < 1.0:
            raise ConfigurationError("cap_eccentricity_deviation must lie in [0, 1)")
        if self.profile_blend_deviation < 0:
            raise ConfigurationError("profile_blend_deviation must be non-negative")


DEFAULT_SHAPE = ShapeConfig()
DEFAULT_TESSELLATION = Tessellation()


def max_vertex_deviation(shape=DEFAULT_SHAPE):
    """D_max: the largest vertex displacement at randomness 1, as a fraction of cap diameter.

    Heights move by at most the stem change plus a quarter of the blend change times
    the cap height (``|sin^2 - sin| <= 1/4``); horizontal positions move by at most
    the eccentricity times the radius.
    """
    vertical = (shape.stem_height_ratio * shape.stem_length_deviation
                + shape.cap_height_ratio * shape.profile_blend_deviation / 4.0)
    horizontal = shape.cap_eccentricity_deviation
    return 0.5 * math.hypot(vertical, horizontal)


def cap_diameter(age):
    """Cap diameter in millimetres for a given age."""
    if not MIN_AGE <= age <= MAX_AGE:
        raise DomainError(f"age must lie in [{MIN_AGE}, {MAX_AGE}], got {age}")
    return DIAMETER_PER_AGE_MM * age


@dataclass
class MushroomMesh:
    vertices: np.ndarray  # (V, 3) float64, metres
    triangles: np.ndarray  # (T, 3) int64
    params: MushroomParams
    cap_diameter: float  # mm
    tessellation: Tessellation = field(default=DEFAULT_TESSELLATION)

    @property
    def height(self):
        return float(self.vertices[:, 2].max())

    def horizontal_extent(self):
        """Twice the largest distance of any vertex from the stem axis, in metres."""
        return 2.0 * float(np.hypot(self.vertices[:, 0], self.vertices[:, 1]).max())

    def to_bytes(self):
        return self.vertices.tobytes() + self.triangles.tobytes()

    def to_obj(self):
        lines = [f"# mushroom age={self.params.age} randomness={self.params.randomness} "
                 f"seed={self.params.seed}"]
        lines += [f"v {x:.9f} {y:.9f} {z:.9f}" for x, y, z in self.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in self.triangles]
        return "\n".join(lines) + "\n"


def export_obj(mesh, path):
    with open(path, "w") as f:
        f.write(mesh.to_obj())
    return path


def _shape_draws(seed):
    """Three uniforms in [-1, 1] for stem length, eccentricity and blend.

    Keyed by seed only, so one seed yields the same shape variation at every age.
    """
    return SeedStream(seed, STREAM_SHAPE).rng.uniform(-1.0, 1.0, size=3)


def _profile(params, tessellation, shape):
    """Profile rings as (radius, z, eccentric) rows, excluding the two poles."""
    radius = cap_diameter(params.age) / 2000.0
    r = params.randomness
    u_stem, u_ecc, u_blend = _shape_draws(params.seed) if r > 0 else (0.0, 0.0, 0.0)

    stem_height = radius * shape.stem_height_ratio * (1.0 + shape.stem_length_deviation * r * u_stem)
    eccentricity = shape.cap_eccentricity_deviation * r * u_ecc
    blend = float(np.clip(shape.profile_blend + shape.profile_blend_deviation * r * u_blend, 0.0, 1.0))
    cap_height = radius * shape.cap_height_ratio
    stem_radius = radius * shape.stem_radius_ratio

    rings = []
    n_stem = tessellation.stem_segments
    for i in range(n_stem + 1):
        t = i / n_stem
        rings.append((stem_radius * (1.0 - (1.0 - shape.stem_taper) * t), stem_height * t, False))

    n_cap = tessellation.cap_segments
    for j in range(n_cap):
        theta = 0.5 * math.pi * j / n_cap
        s = math.sin(theta)
        z = stem_height + cap_height * ((1.0 - blend) * s + blend * s * s)
        rings.append((radius * math.cos(theta), z, True))

    apex = stem_height + cap_height
    return rings, apex, eccentricity


def generate_mushroom(params, tessellation=DEFAULT_TESSELLATION, shape=DEFAULT_SHAPE):
    """Build the closed triangle mesh for one mushroom."""
    if not isinstance(tessellation, Tessellation):
        raise ConfigurationError(f"expected a Tessellation, got {tessellation!r}")
    rings, apex, eccentricity = _profile(params, tessellation, shape)
    n = tessellation.radial

    phi = 2.0 * math.pi * np.arange(n) / n
    cos_phi, sin_phi = np.cos(phi), np.sin(phi)

    vertices = [np.array([[0.0, 0.0, 0.0]])]
    for radius, z, eccentric in rings:
        sx, sy = (1.0 + eccentricity, 1.0 - eccentricity) if eccentric else (1.0, 1.0)
        ring = np.column_stack([radius * sx * cos_phi, radius * sy * sin_phi, np.full(n, z)])
        vertices.append(ring)
    vertices.append(np.array([[0.0, 0.0, apex]]))
    vertices = np.concatenate(vertices)

    n_rings = len(rings)
    bottom, top = 0, 1 + n_rings * n
    idx = np.arange(n)
    nxt = (idx + 1) % n

    def ring(k):
        return 1 + k * n

    faces = [np.column_stack([np.full(n, bottom), ring(0) + nxt, ring(0) + idx])]
    for k in range(n_rings - 1):
        a, b = ring(k), ring(k + 1)
        faces.append(np.column_stack([a + idx, a + nxt, b + nxt]))
        faces.append(np.column_stack([a + idx, b + nxt, b + idx]))
    last = ring(n_rings - 1)
    faces.append(np.column_stack([last + idx, last + nxt, np.full(n, top)]))
    triangles = np.concatenate(faces).astype(np.int64)

    return MushroomMesh(
        vertices=np.ascontiguousarray(vertices, dtype=np.float64),
        triangles=np.ascontiguousarray(triangles),
        params=params,
        cap_diameter=cap_diameter(params.age),
        tessellation=tessellation,
    )


def chain_age_values(age, increment, count):
    if count < 1:
        raise DomainError(f"count must be at least 1, got {count}")
    return [round(min(age + i * increment, MAX_AGE), 12) for i in range(count)]


def chain_ages(base, count, tessellation=DEFAULT_TESSELLATION, shape=DEFAULT_SHAPE):
    """Meshes at ages age0, age0 + inc, ... clamped to 1, sharing seed and randomness."""
    ages = chain_age_values(base.age, base.age_increment, count)
    return [generate_mushroom(base.with_age(a), tessellation, shape) for a in ages]


def row_seed(master_seed, row):
    return SeedStream(master_seed, STREAM_ROW, row).derive()


def bank_ages(rows=4, per_row=20):
    """Ages of the bank variants in bank order (row-major)."""
    if rows < 1 or per_row < 1:
        raise DomainError("rows and per_row must be at least 1")
    increment = (MAX_AGE - MIN_AGE) / (per_row - 1) if per_row > 1 else 0.0
    return chain_age_values(MIN_AGE, increment, per_row) * rows


def variant_bank(rows=4, per_row=20, randomness=0.25, master_seed=0,
                 tessellation=DEFAULT_TESSELLATION, shape=DEFAULT_SHAPE):
    """rows x per_row meshes; each row shares one seed and spans ages 0.05..1."""
    if rows < 1 or per_row < 1:
        raise DomainError("rows and per_row must be at least 1")
    increment = (MAX_AGE - MIN_AGE) / (per_row - 1) if per_row > 1 else 0.0
    bank = []
    for row in range(rows):
        base = MushroomParams(MIN_AGE, increment, randomness, row_seed(master_seed, row))
        bank.extend(chain_ages(base, per_row, tessellation, shape))
    logger.debug("variant bank built rows=%d per_row=%d randomness=%s", rows, per_row, randomness)
    return bank
