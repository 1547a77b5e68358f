# tests/test_cli.py
import json
import os

import numpy as np
import pytest

from modules import cli, evalmetrics, genclient
from modules.annotate import AnnotationSet
from modules.mock_service import MockGenerationService


def run(*argv):
    return cli.main(list(argv) + ["-q"])


def tree(root, skip=(".stamps",)):
    """Relative path -> bytes for every file below ``root``, ignoring stamp directories."""
    files = {}
    for directory, subdirs, names in os.walk(root):
        subdirs[:] = [d for d in subdirs if d not in skip]
        for name in names:
            path = os.path.join(directory, name)
            with open(path, "rb") as f:
                files[os.path.relpath(path, root)] = f.read()
    return files


def test_parser_lists_every_command():
    parser = cli.build_parser()
    for name in cli.COMMANDS:
        args = parser.parse_args([name, "ref.feat"] if name == "distance" else [name])
        assert args.command == name
    with pytest.raises(SystemExit):
        parser.parse_args(["explode"])


def test_gen_scenes_zero_count(tmp_path, pipeline_config):
    out = str(tmp_path / "out")
    assert run("gen-scenes", "--config", pipeline_config, "--count", "0") == 0
    with open(os.path.join(out, "scenes", "index.json")) as f:
        assert json.load(f) == {"master_seed": 3, "seeds": []}
    assert run("render", "--config", pipeline_config) == 2


def test_gen_scenes_is_reproducible_and_incremental(tmp_path, pipeline_config):
    first, second = str(tmp_path / "a"), str(tmp_path / "b")
    assert run("gen-scenes", "--config", pipeline_config, "--out", first) == 0
    assert run("gen-scenes", "--config", pipeline_config, "--out", second, "--force") == 0
    assert tree(os.path.join(first, "scenes")) == tree(os.path.join(second, "scenes"))
    assert len(tree(os.path.join(first, "scenes"))) == 4

    index = os.path.join(first, "scenes", "index.json")
    before = os.stat(index).st_mtime_ns
    assert run("gen-scenes", "--config", pipeline_config, "--out", first) == 0
    assert os.stat(index).st_mtime_ns == before

    assert run("gen-scenes", "--config", pipeline_config, "--out", first, "--seed", "4") == 0
    with open(index) as f:
        assert json.load(f)["master_seed"] == 4


def test_render_without_scenes(tmp_path, pipeline_config):
    assert run("render", "--config", pipeline_config) == 2


def _pipeline(config, out, jobs):
    for stage in ("gen-scenes", "render", "annotate", "crop", "tile"):
        assert run(stage, "--config", config, "--out", out, "-j", str(jobs)) == 0, stage


def test_pipeline_is_independent_of_worker_count(tmp_path, pipeline_config):
    serial, parallel = str(tmp_path / "serial"), str(tmp_path / "parallel")
    _pipeline(pipeline_config, serial, 1)
    _pipeline(pipeline_config, parallel, 4)
    a, b = tree(serial), tree(parallel)
    assert sorted(a) == sorted(b)
    assert a == b

    full = AnnotationSet.load(os.path.join(serial, "annotations", "full.json"))
    full.validate(check_masks=True)
    assert len(full.images) == 3
    assert full.annotations

    crops = AnnotationSet.load(os.path.join(serial, "annotations", "crops.json"))
    crops.validate(check_masks=True)
    assert len(crops.images) == 9
    assert sorted({tuple(img["window"]) for img in crops.images}) == [
        (0, 32, 128, 128), (96, 32, 128, 128), (192, 32, 128, 128)]
    for img in crops.images:
        assert os.path.exists(os.path.join(serial, "crops", img["control_image"]))

    tiles = AnnotationSet.load(os.path.join(serial, "annotations", "tiles.json"))
    assert len(tiles.images) == 3 * 12


def test_stages_skip_when_current(tmp_path, pipeline_config):
    out = str(tmp_path / "out")
    _pipeline(pipeline_config, out, 1)
    full = os.path.join(out, "annotations", "full.json")
    ids = [os.path.join(out, "renders", n) for n in os.listdir(os.path.join(out, "renders")) if n.endswith("_ids.png")]
    before = {p: os.stat(p).st_mtime_ns for p in ids + [full]}
    _pipeline(pipeline_config, out, 1)
    assert {p: os.stat(p).st_mtime_ns for p in before} == before

    os.remove(ids[0])
    assert run("render", "--config", pipeline_config, "--out", out) == 0
    assert os.path.exists(ids[0])


def test_jobs_submit_and_pair(tmp_path, pipeline_config):
    out = str(tmp_path / "out")
    _pipeline(pipeline_config, out, 1)
    assert run("jobs", "--config", pipeline_config, "--out", out) == 0
    manifest_path = os.path.join(out, "jobs", "manifest.json")
    manifest = genclient.JobManifest.load(manifest_path)
    assert len(manifest.jobs) == 9 * 2
    assert {j.ablation for j in manifest.jobs} == {"CNET", "FULL"}
    assert os.path.exists(str(tmp_path / "refs" / "style_1.png"))

    assert run("jobs", "--config", pipeline_config, "--out", out, "--ablation", "ALL", "--force") == 0
    assert len(genclient.JobManifest.load(manifest_path).jobs) == 9 * 9

    assert run("submit", "--config", pipeline_config, "--out", out, "--dry-run") == 0
    assert genclient.JobManifest.load(manifest_path).counts()[genclient.PENDING] == 81

    crops = os.path.join(out, "annotations", "crops.json")
    with MockGenerationService(mode="echo") as service:
        assert run("submit", "--config", pipeline_config, "--out", out, "--endpoint", service.url,
                   "--annotations", crops) == 0
    manifest = genclient.JobManifest.load(manifest_path)
    assert manifest.counts()[genclient.DONE] == 81
    with open(os.path.join(out, "jobs", "pairing.json")) as f:
        pairing = json.load(f)
    assert len(pairing["pairs"]) == 9 * 8
    assert all(p["ablation"] != "BSD" for p in pairing["pairs"])


def test_submit_unreachable_service(tmp_path, pipeline_config):
    out = str(tmp_path / "out")
    _pipeline(pipeline_config, out, 1)
    assert run("jobs", "--config", pipeline_config, "--out", out) == 0
    assert run("submit", "--config", pipeline_config, "--out", out, "--endpoint", "http://127.0.0.1:9") == 3
    manifest = genclient.JobManifest.load(os.path.join(out, "jobs", "manifest.json"))
    assert manifest.counts()[genclient.FAILED] == len(manifest.jobs)


def test_eval_stats_and_distance(tmp_path, pipeline_config, capsys):
    out = str(tmp_path / "out")
    _pipeline(pipeline_config, out, 1)
    full = AnnotationSet.load(os.path.join(out, "annotations", "full.json"))
    predictions = [{"image_id": a["image_id"], "score": 1.0, "segmentation": a["segmentation"]}
                   for a in full.annotations]
    pred_path = tmp_path / "pred.json"
    pred_path.write_text(json.dumps(predictions))

    assert run("eval", "--config", pipeline_config, "--out", out, "--predictions", str(pred_path)) == 0
    with open(os.path.join(out, "reports", "eval.json")) as f:
        report = json.load(f)
    assert report["AP"] == pytest.approx(1.0)
    assert report["F1"] == pytest.approx(1.0)
    assert "AP@[.50:.95]" in capsys.readouterr().out

    assert run("stats", "--config", pipeline_config, "--out", out) == 0
    with open(os.path.join(out, "reports", "stats.json")) as f:
        stats = json.load(f)
    assert stats["images"] == 3
    assert stats["instances"] == len(full.annotations)

    rng = np.random.default_rng(0)
    reference = str(tmp_path / "real.feat")
    candidate = str(tmp_path / "synthetic.csv")
    evalmetrics.save_features(reference, rng.normal(size=(40, 4)))
    evalmetrics.save_features(candidate, rng.normal(size=(40, 4)) + 1.0)
    assert run("distance", reference, candidate, "--same", "--config", pipeline_config, "--out", out) == 0
    with open(os.path.join(out, "reports", "distance.csv")) as f:
        lines = f.read().splitlines()
    assert lines[0] == "dataset,fid,kid_mean,kid_std"
    assert [line.split(",")[0] for line in lines[1:]] == ["SAME", "synthetic.csv"]


@pytest.mark.parametrize("argv, code", [
    (["eval"], 1),
    (["distance", "missing.feat"], 1),
    (["jobs"], 2),
    (["stats"], 2),
    (["submit"], 2),
])
def test_exit_codes(tmp_path, pipeline_config, argv, code):
    assert run(*argv, "--config", pipeline_config) == code


def test_bad_config_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"scenes": {"count": 1, "colour": "red"}}))
    assert run("gen-scenes", "--config", str(path)) == 1
    assert run("gen-scenes", "--config", str(tmp_path / "absent.json")) == 2
