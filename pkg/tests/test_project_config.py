# tests/test_project_config.py
import json

import pytest

from modules import genclient
from modules.errors import ConfigurationError, StorageError, ValidationError
from modules.project_config import ProjectConfig, load_config


def test_defaults():
    cfg = ProjectConfig()
    assert cfg.scenes.count == 2000
    assert cfg.master_seed == 0
    camera = cfg.camera_model()
    assert camera.position == (0.0, 0.0, 1.0)
    assert camera.resolution == (1920, 1080)
    assert cfg.bank_config().size == 80
    assert cfg.crop_spec().crop_size == (1024, 1024)
    assert cfg.tile_spec().overlap_fraction == 0.2
    assert cfg.ablation_configs() == [genclient.AblationConfig.FULL]
    assert cfg.generation_settings().prompt == genclient.DEFAULT_PROMPT
    assert cfg.eval_config().max_detections == 100
    assert cfg.paths.resolve("scenes").replace("\\", "/") == "output/scenes"


def test_dict_round_trip(tmp_path):
    cfg = ProjectConfig(master_seed=9).with_overrides(count=5, ablation=["CNET", "FULL"])
    data = cfg.to_dict()
    assert data["version"] == 1
    assert data["sampling"]["region"] == [-0.5, -0.4, 0.5, 0.4]
    assert ProjectConfig.from_dict(json.loads(json.dumps(data))) == cfg

    path = str(tmp_path / "project.json")
    cfg.save(path)
    assert load_config(path, environ={}) == cfg


def test_partial_file_keeps_defaults(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"master_seed": 4, "camera": {"resolution": [320, 192]}}))
    cfg = load_config(str(path), environ={})
    assert cfg.master_seed == 4
    assert cfg.camera.resolution == (320, 192)
    assert cfg.camera.height == 1.0
    assert cfg.scenes.count == 2000


@pytest.mark.parametrize("data, message", [
    ({"scenes": {"cout": 3}}, "scenes.cout"),
    ({"scene": {"count": 3}}, "scene"),
    ({"version": 2}, "version"),
    ({"scenes": {"count": "many"}}, "scenes.count"),
    ({"scenes": {"count": -1}}, "non-negative"),
    ({"camera": {"height": 0}}, "camera.height"),
    ({"sampling": {"region": [0, 0, 1]}}, "sampling.region"),
    ({"run": {"preview": 1}}, "run.preview"),
    ({"master_seed": -5}, "master_seed"),
    ({"service": "fast"}, "service"),
])
def test_invalid_config(data, message):
    with pytest.raises(ConfigurationError, match=message):
        ProjectConfig.from_dict(data)


def test_unknown_ablation_name():
    with pytest.raises(ValidationError):
        ProjectConfig.from_dict({"generation": {"ablation": ["CNET_L9"]}})


def test_all_ablations():
    cfg = ProjectConfig().with_overrides(ablation=["all"])
    assert cfg.ablation_configs() == list(genclient.AblationConfig)


def test_environment_overrides_file(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"service": {"endpoint": "http://file:1"}}))
    assert load_config(str(path), environ={}).service.endpoint == "http://file:1"
    env = {genclient.ENDPOINT_ENV: "http://env:2"}
    assert load_config(str(path), environ=env).service.endpoint == "http://env:2"
    # command-line flags win over the environment
    assert load_config(str(path), environ=env).with_overrides(endpoint="http://flag:3").service.endpoint \
        == "http://flag:3"


def test_overrides():
    cfg = ProjectConfig().with_overrides(seed=3, count=0, out="elsewhere", jobs=4)
    assert cfg.master_seed == 3
    assert cfg.scenes.count == 0
    assert cfg.paths.root == "elsewhere"
    assert cfg.run.jobs == 4
    with pytest.raises(ConfigurationError):
        ProjectConfig().with_overrides(jobs=0)


def test_scene_config_follows_sections():
    cfg = ProjectConfig.from_dict({"sampling": {"region": [-0.1, -0.1, 0.1, 0.1], "min_distance": 0.05},
                                   "camera": {"height": 0.5}, "bank": {"rows": 2, "per_row": 3}})
    scene_config = cfg.scene_config()
    assert scene_config.region.bounds == (-0.1, -0.1, 0.1, 0.1)
    assert scene_config.min_distance == 0.05
    assert scene_config.camera.position == (0.0, 0.0, 0.5)
    assert scene_config.bank.size == 6


def test_missing_config_file(tmp_path):
    with pytest.raises(StorageError):
        load_config(str(tmp_path / "missing.json"), environ={})


def test_pipeline_config_fixture_loads(pipeline_config):
    cfg = load_config(pipeline_config, environ={})
    assert cfg.crop_spec().crop_size == (128, 128)
    assert [c.name for c in cfg.ablation_configs()] == ["CNET", "FULL"]
