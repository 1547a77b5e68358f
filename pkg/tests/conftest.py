# tests/conftest.py
import json

import pytest

from modules.evalmetrics import GroundTruth, Prediction
from modules.render import CameraModel
from modules.scene import BankConfig, Region, SceneConfig
from oracles import box_mask

SMALL_BANK = BankConfig(rows=2, per_row=5, radial_segments=8, axial_segments=4)


@pytest.fixture
def small_scene_config():
    """A 0.2 m square patch seen from 0.3 m at 128 x 128, with a coarse bank."""
    return SceneConfig(
        region=Region.sized(0.2, 0.2),
        min_distance=0.04,
        camera=CameraModel(position=(0.0, 0.0, 0.3), resolution=(128, 128)),
        bank=SMALL_BANK,
    )


@pytest.fixture
def toy_eval():
    """Three 10 x 10 images with hand-computed scores.

    image 1: GT A, GT B; p1 (0.9) equals A, p2 (0.6) misses both
    image 2: GT C (5 x 5); p3 (0.8) covers 18 of its pixels, IoU 0.72
    image 3: GT D; p4 (0.7) exact, p5 (0.3) a duplicate of D
    """
    shape = (10, 10)
    p3 = box_mask(shape, (0, 2), (0, 4))
    p3[3, 0:3] = True
    gts = [
        GroundTruth(1, box_mask(shape, (0, 3), (0, 3))),
        GroundTruth(1, box_mask(shape, (5, 8), (5, 8))),
        GroundTruth(2, box_mask(shape, (0, 4), (0, 4))),
        GroundTruth(3, box_mask(shape, (2, 5), (2, 5))),
    ]
    preds = [
        Prediction(1, 0.9, box_mask(shape, (0, 3), (0, 3))),
        Prediction(1, 0.6, box_mask(shape, (0, 3), (6, 9))),
        Prediction(2, 0.8, p3),
        Prediction(3, 0.7, box_mask(shape, (2, 5), (2, 5))),
        Prediction(3, 0.3, box_mask(shape, (2, 5), (2, 5))),
    ]
    return preds, gts


@pytest.fixture
def pipeline_config(tmp_path):
    """A small end-to-end project: 3 scenes at 320 x 192, 128 px crops and 96 px tiles."""
    refs = [str(tmp_path / "refs" / "style_1.png"), str(tmp_path / "refs" / "style_2.png")]
    config = {
        "version": 1,
        "master_seed": 3,
        "scenes": {"count": 3},
        "sampling": {"region": [-0.2, -0.15, 0.2, 0.15], "min_distance": 0.04},
        "camera": {"height": 0.5, "resolution": [320, 192]},
        "bank": {"rows": 2, "per_row": 5, "radial_segments": 8, "axial_segments": 4},
        "crop": {"size": [128, 128]},
        "tile": {"size": [96, 96]},
        "paths": {"root": str(tmp_path / "out")},
        "generation": {"ablation": ["CNET", "FULL"], "ip_references": refs, "output_size": [64, 64]},
        "service": {"backoff": 0.01, "timeout": 10.0},
    }
    path = tmp_path / "project.json"
    path.write_text(json.dumps(config))
    return str(path)
