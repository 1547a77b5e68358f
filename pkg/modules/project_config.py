# modules/project_config.py
"""Project configuration: a versioned JSON file over built-in defaults.

Precedence, lowest first: defaults, config file, environment
($MUSHROOM_GEN_ENDPOINT), command-line flags.
"""
import os
from dataclasses import asdict, dataclass, field, fields, replace

from modules import annotate, evalmetrics, genclient, scene
from modules.errors import ConfigurationError, ValidationError
from modules.render import CameraModel
from modules.storage_utils import read_json, write_json
from utils import check_seed

CONFIG_VERSION = 1


@dataclass(frozen=True)
class ScenesSection:
    count: int = 2000

    def __post_init__(self):
        if self.count < 0:
            raise ConfigurationError("scenes.count must be non-negative")


@dataclass(frozen=True)
class SamplingSection:
    region: tuple = (-0.5, -0.4, 0.5, 0.4)
    min_distance: float = scene.DEFAULT_MIN_DISTANCE
    max_attempts: int = scene.BRIDSON_ATTEMPTS
    max_tilt: float = scene.MAX_TILT

    def __post_init__(self):
        if len(self.region) != 4:
            raise ConfigurationError("sampling.region needs [x_min, y_min, x_max, y_max]")
        if self.min_distance <= 0:
            raise ConfigurationError("sampling.min_distance must be positive")
        if not 0 <= self.max_tilt <= 90:
            raise ConfigurationError("sampling.max_tilt must lie in [0, 90]")


@dataclass(frozen=True)
class CameraSection:
    height: float = 1.0
    focal_length: float = 50.0
    sensor_width: float = 36.0
    resolution: tuple = (1920, 1080)

    def __post_init__(self):
        if self.height <= 0:
            raise ConfigurationError("camera.height must be positive")


@dataclass(frozen=True)
class BankSection:
    rows: int = 4
    per_row: int = 20
    randomness: float = 0.25
    master_seed: int = 0
    radial_segments: int = 32
    axial_segments: int = 24

    def __post_init__(self):
        if self.rows < 1 or self.per_row < 1:
            raise ConfigurationError("bank.rows and bank.per_row must be at least 1")
        if not 0.0 <= self.randomness <= 1.0:
            raise ConfigurationError("bank.randomness must lie in [0, 1]")


@dataclass(frozen=True)
class CropSection:
    size: tuple = (1024, 1024)
    count: int = 3
    jitter: int = 0
    min_visible_area: int = 16
    min_visibility_ratio: float = 0.1


@dataclass(frozen=True)
class TileSection:
    size: tuple = (512, 512)
    overlap: float = 0.2
    min_visible_area: int = 16
    min_visibility_ratio: float = 0.1


@dataclass(frozen=True)
class PathsSection:
    root: str = "output"
    scenes: str = "scenes"
    renders: str = "renders"
    annotations: str = "annotations"
    crops: str = "crops"
    tiles: str = "tiles"
    jobs: str = "jobs"
    artifacts: str = "artifacts"
    reports: str = "reports"

    def resolve(self, name):
        return os.path.join(self.root, getattr(self, name))


@dataclass(frozen=True)
class ServiceSection:
    endpoint: str = genclient.DEFAULT_ENDPOINT
    concurrency: int = 4
    attempts: int = 3
    backoff: float = 0.5
    timeout: float = 60.0

    def __post_init__(self):
        if self.concurrency < 1 or self.attempts < 1:
            raise ConfigurationError("service.concurrency and service.attempts must be at least 1")


@dataclass(frozen=True)
class GenerationSection:
    prompt: str = genclient.DEFAULT_PROMPT
    negative_prompt: str = ""
    control_strength: float = 1.0
    ip_weight: float = 0.5
    ip_references: tuple = ("references/style_1.png", "references/style_2.png")
    lora_weight: float = 1.0
    sampler_steps: int = 30
    output_size: tuple = (1024, 1024)
    ablation: tuple = ("FULL",)
    seeds_per_depth: int = 1

    def __post_init__(self):
        for name in self.ablation:
            if name.upper() != "ALL":
                genclient.AblationConfig.parse(name)
        if self.seeds_per_depth < 1:
            raise ConfigurationError("generation.seeds_per_depth must be at least 1")


@dataclass(frozen=True)
class MetricsSection:
    max_detections: int = 100
    f1_iou: float = 0.5
    score_threshold: float = 0.5
    kid_subset_size: int = None
    kid_subsets: int = 100
    kid_seed: int = 0


@dataclass(frozen=True)
class RunSection:
    jobs: int = 1
    preview: bool = True

    def __post_init__(self):
        if self.jobs < 1:
            raise ConfigurationError("run.jobs must be at least 1")


SECTIONS = {
    "scenes": ScenesSection,
    "sampling": SamplingSection,
    "camera": CameraSection,
    "bank": BankSection,
    "crop": CropSection,
    "tile": TileSection,
    "paths": PathsSection,
    "service": ServiceSection,
    "generation": GenerationSection,
    "metrics": MetricsSection,
    "run": RunSection,
}


@dataclass(frozen=True)
class ProjectConfig:
    master_seed: int = 0
    scenes: ScenesSection = field(default_factory=ScenesSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    camera: CameraSection = field(default_factory=CameraSection)
    bank: BankSection = field(default_factory=BankSection)
    crop: CropSection = field(default_factory=CropSection)
    tile: TileSection = field(default_factory=TileSection)
    paths: PathsSection = field(default_factory=PathsSection)
    service: ServiceSection = field(default_factory=ServiceSection)
    generation: GenerationSection = field(default_factory=GenerationSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self):
        try:
            check_seed(self.master_seed)
        except ValueError as e:
            raise ConfigurationError(f"master_seed: {e}") from e

    def to_dict(self):
        def plain(value):
            if isinstance(value, (list, tuple)):
                return [plain(v) for v in value]
            if isinstance(value, dict):
                return {k: plain(v) for k, v in value.items()}
            return value
        data = {"version": CONFIG_VERSION, "master_seed": self.master_seed}
        for name in SECTIONS:
            data[name] = plain(asdict(getattr(self, name)))
        return data

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a JSON object")
        if data.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigurationError(f"unsupported config version {data.get('version')!r}")
        unknown = sorted(set(data) - set(SECTIONS) - {"version", "master_seed"})
        if unknown:
            raise ConfigurationError(f"unknown config key {unknown[0]!r}")
        kwargs = {name: _section(section_cls, data[name], name)
                  for name, section_cls in SECTIONS.items() if name in data}
        if "master_seed" in data:
            kwargs["master_seed"] = _coerce(data["master_seed"], 0, "master_seed")
        return cls(**kwargs)

    def save(self, path):
        return write_json(path, self.to_dict())

    # runtime objects

    def camera_model(self):
        return CameraModel(position=(0.0, 0.0, self.camera.height), focal_length=self.camera.focal_length,
                           sensor_width=self.camera.sensor_width, resolution=tuple(self.camera.resolution))

    def bank_config(self):
        return scene.BankConfig(**asdict(self.bank))

    def scene_config(self):
        return scene.SceneConfig(
            region=scene.Region(*self.sampling.region),
            min_distance=self.sampling.min_distance,
            max_attempts_per_point=self.sampling.max_attempts,
            max_tilt=self.sampling.max_tilt,
            bank=self.bank_config(),
            camera=self.camera_model(),
        )

    def crop_spec(self):
        return annotate.CropSpec(tuple(self.crop.size), self.crop.count, self.crop.jitter,
                                 self.crop.min_visible_area, self.crop.min_visibility_ratio)

    def tile_spec(self):
        return annotate.TileSpec(tuple(self.tile.size), self.tile.overlap,
                                 self.tile.min_visible_area, self.tile.min_visibility_ratio)

    def generation_settings(self):
        g = self.generation
        return genclient.GenerationSettings(g.prompt, g.negative_prompt, g.control_strength, g.ip_weight,
                                            tuple(g.ip_references), g.lora_weight, g.sampler_steps,
                                            tuple(g.output_size))

    def ablation_configs(self):
        if any(name.upper() == "ALL" for name in self.generation.ablation):
            return list(genclient.AblationConfig)
        return [genclient.AblationConfig.parse(name) for name in self.generation.ablation]

    def eval_config(self):
        m = self.metrics
        return evalmetrics.EvalConfig(max_detections=m.max_detections, f1_iou=m.f1_iou,
                                      score_threshold=m.score_threshold)

    def with_overrides(self, seed=None, count=None, endpoint=None, out=None, jobs=None, ablation=None):
        cfg = self
        if seed is not None:
            cfg = replace(cfg, master_seed=seed)
        if count is not None:
            cfg = replace(cfg, scenes=replace(cfg.scenes, count=count))
        if endpoint is not None:
            cfg = replace(cfg, service=replace(cfg.service, endpoint=endpoint))
        if out is not None:
            cfg = replace(cfg, paths=replace(cfg.paths, root=out))
        if jobs is not None:
            cfg = replace(cfg, run=replace(cfg.run, jobs=jobs))
        if ablation is not None:
            cfg = replace(cfg, generation=replace(cfg.generation, ablation=tuple(ablation)))
        return cfg


def _coerce(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{path} must be a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigurationError(f"{path} must be a list, got {value!r}")
        return tuple(value)
    return value


def _section(section_cls, data, path):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path} must be an object")
    defaults = section_cls()
    known = {f.name for f in fields(section_cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown config key '{path}.{unknown[0]}'")
    kwargs = {key: _coerce(value, getattr(defaults, key), f"{path}.{key}") for key, value in data.items()}
    try:
        return section_cls(**kwargs)
    except ConfigurationError:
        raise
    except (ValidationError, ValueError, TypeError) as e:
        raise ConfigurationError(f"{path}: {e}") from e


def load_config(path=None, environ=None):
    """Defaults, overlaid by ``path`` and then the environment."""
    environ = os.environ if environ is None else environ
    cfg = ProjectConfig.from_dict(read_json(path)) if path else ProjectConfig()
    endpoint = environ.get(genclient.ENDPOINT_ENV)
    if endpoint:
        cfg = cfg.with_overrides(endpoint=endpoint)
    return cfg
