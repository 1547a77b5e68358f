# tests/test_genclient.py
import itertools
import json
import os

import httpx
import numpy as np
import pytest

from modules import annotate, genclient
from modules.errors import PairingError, ValidationError
from modules.genclient import AblationConfig, DepthRef, GenerationSettings, JobManifest
from modules.mock_service import parse_multipart, placeholder_png
from modules.storage_utils import write_png

BLOCKS = ("controlnet", "ip_adapter", "loras")


def _control_images(directory, count):
    paths = []
    for k in range(count):
        path = os.path.join(directory, f"scene_{k}_c0_control.png")
        write_png(path, np.full((8, 8), 1000 * k, dtype=np.uint16))
        paths.append(path)
    return paths


@pytest.fixture
def depth_files(tmp_path, monkeypatch):
    """Control images at the relative paths the job tests name."""
    monkeypatch.chdir(tmp_path)
    names = [f"d/scene_{k}_control.png" for k in range(100)]
    names += ["d/x_control.png", "d/a_control.png", "crops/scene_5_c0_control.png"]
    for name in names:
        write_png(name, np.zeros((4, 4), dtype=np.uint16))
    return tmp_path


def _settings(tmp_path):
    refs = genclient.ensure_placeholder_references(
        [str(tmp_path / "refs" / "a.png"), str(tmp_path / "refs" / "b.png")], size=(8, 8))
    return GenerationSettings(ip_references=tuple(refs), output_size=(16, 16))


def test_ablation_configs():
    assert len(AblationConfig) == 9
    assert AblationConfig.FULL.label == "CNET+IP+L1+L2"
    assert AblationConfig.BSD.label == "BSD"
    assert AblationConfig.parse("cnet+ip") is AblationConfig.CNET_IP
    assert AblationConfig.parse(" Full ") is AblationConfig.FULL
    with pytest.raises(ValidationError):
        AblationConfig.parse("CNET_L3")
    assert all(c.controlnet for c in AblationConfig if c is not AblationConfig.BSD)


def test_default_prompt_carries_trigger_words(depth_files):
    job = genclient.build_job("d/scene_1_control.png", AblationConfig.FULL, 5)
    assert [lora["name"] for lora in job.loras] == ["white_button_mushroom", "compost_mycelium"]
    for lora in job.loras:
        for word in lora["trigger_words"]:
            assert word in genclient.DEFAULT_PROMPT


def test_missing_trigger_word_is_rejected(depth_files):
    with pytest.raises(ValidationError):
        genclient.build_job("d/x_control.png", AblationConfig.CNET_L1, 1, prompt="mushrooms on soil")
    job = genclient.build_job("d/x_control.png", AblationConfig.CNET, 1, prompt="mushrooms on soil")
    assert job.prompt == "mushrooms on soil"


def test_job_ids_and_control_image(depth_files):
    ref = DepthRef("crops/scene_5_c0_control.png", "scene_5_c0.png", 5, (0, 28, 1024, 1024))
    cnet = genclient.build_job(ref, "CNET", 42)
    assert cnet.job_id == "CNET-scene_5_c0-s42"
    assert cnet.control_image == "crops/scene_5_c0_control.png"
    assert cnet.provenance == {"depth": ref.path, "image": "scene_5_c0.png", "scene_seed": 5,
                               "window": [0, 28, 1024, 1024]}

    bsd = genclient.build_job(ref, "BSD", 42)
    assert bsd.control_image is None
    assert bsd.to_dict()["controlnet"] is None
    assert bsd.provenance["image"] == "scene_5_c0.png"
    assert genclient.build_job(None, "BSD", 1).job_id == "BSD-none-s1"
    with pytest.raises(ValidationError):
        genclient.build_job(None, "CNET", 1)


@pytest.mark.parametrize("config", [c for c in AblationConfig if c.controlnet])
def test_missing_depth_file_is_rejected(depth_files, config):
    with pytest.raises(ValidationError, match="does not exist"):
        genclient.build_job("d/scene_404_control.png", config, 1)
    with pytest.raises(ValidationError):
        genclient.build_ablation_batch([DepthRef("gone/scene_1_control.png")], [1], [config])
    assert genclient.build_job("d/scene_1_control.png", config, 1).control_image == "d/scene_1_control.png"


def test_bsd_keeps_provenance_of_a_missing_depth_file(depth_files):
    job = genclient.build_job(DepthRef("gone/scene_9_control.png", "scene_9.png", 9), AblationConfig.BSD, 1)
    assert job.control_image is None
    assert job.provenance["depth"] == "gone/scene_9_control.png"


def test_ablation_toggles_only_its_blocks(depth_files):
    ref = DepthRef("d/scene_1_control.png", "scene_1.png")
    jobs = {c: genclient.build_job(ref, c, 7).to_dict() for c in AblationConfig}
    for a, b in itertools.combinations(AblationConfig, 2):
        da, db = jobs[a], jobs[b]
        differing = {k for k in da if k not in ("job_id", "ablation") and da[k] != db[k]}
        expected = set()
        if a.controlnet != b.controlnet:
            expected.add("controlnet")
        if a.ip_adapter != b.ip_adapter:
            expected.add("ip_adapter")
        if (a.lora_mushroom, a.lora_compost) != (b.lora_mushroom, b.lora_compost):
            expected.add("loras")
        assert differing == expected, (a.name, b.name)
        assert differing <= set(BLOCKS)


def test_full_ablation_batch_size(depth_files):
    refs = [DepthRef(f"d/scene_{k}_control.png", f"scene_{k}.png") for k in range(100)]
    seeds = list(range(1000, 1100))
    manifest = genclient.build_ablation_batch(refs, seeds)
    assert len(manifest.jobs) == 900
    assert len({j.job_id for j in manifest.jobs}) == 900
    for config in AblationConfig:
        assert [j.seed for j in manifest.jobs if j.ablation == config.name] == seeds
    assert manifest.counts() == {"pending": 900, "submitted": 0, "done": 0, "failed": 0}
    with pytest.raises(ValidationError):
        genclient.build_ablation_batch(refs, seeds[:-1])


def test_depth_batch_seeds(depth_files):
    refs = [DepthRef(f"d/scene_{k}_control.png") for k in range(3)]
    manifest = genclient.build_depth_batch(refs, 11, [AblationConfig.CNET], seeds_per_depth=2)
    seeds = [j.seed for j in manifest.jobs]
    assert len(seeds) == 6
    assert len(set(seeds)) == 6
    assert all(0 <= s < 2 ** 32 for s in seeds)
    assert seeds[0] == genclient.generation_seed(11, 0, 0)
    assert seeds[1] == genclient.generation_seed(11, 0, 1)
    again = genclient.build_depth_batch(refs, 11, [AblationConfig.CNET], seeds_per_depth=2)
    assert [j.job_id for j in again.jobs] == [j.job_id for j in manifest.jobs]
    assert again.batch_id == manifest.batch_id


def test_depth_refs_from_coco():
    images = [annotate.image_entry(1, "scene_3_c0", 64, 64, 3, window=(0, 32, 64, 64),
                                   control_image="scene_3_c0_control.png")]
    refs = genclient.depth_refs_from_coco(annotate.AnnotationSet(images), "out/crops")
    assert refs == [DepthRef(os.path.join("out/crops", "scene_3_c0_control.png"), "scene_3_c0.png", 3,
                             (0, 32, 64, 64))]
    with pytest.raises(ValidationError):
        genclient.depth_refs_from_coco(annotate.AnnotationSet([annotate.image_entry(1, "a", 4, 4, 0)]), "x")


def test_sweeps(depth_files):
    ref = DepthRef("d/scene_2_control.png")
    prompts = [genclient.DEFAULT_PROMPT, genclient.DEFAULT_PROMPT + ", close-up"]
    jobs = genclient.build_prompt_sweep(ref, 9, prompts, reference_sets=[("r1.png",)])
    assert [j.job_id for j in jobs] == ["FULL-scene_2-s9-p0", "FULL-scene_2-s9-p1", "FULL-scene_2-s9-r0"]
    assert jobs[2].ip_adapter["references"] == ["r1.png"]
    assert len({j.seed for j in jobs}) == 1
    seeds = genclient.build_seed_sweep(ref, [1, 2, 3], AblationConfig.CNET)
    assert [j.seed for j in seeds] == [1, 2, 3]


def test_manifest_transitions(depth_files):
    manifest = genclient.build_ablation_batch([DepthRef("d/a_control.png")], [1], [AblationConfig.CNET])
    job_id = manifest.jobs[0].job_id
    with pytest.raises(ValidationError):
        manifest.set_status(job_id, genclient.DONE)
    manifest.set_status(job_id, genclient.SUBMITTED)
    manifest.set_status(job_id, genclient.FAILED, "http 500")
    with pytest.raises(ValidationError):
        manifest.set_status(job_id, genclient.SUBMITTED)
    assert manifest.reset_for_resume() == 1
    assert manifest.status[job_id] == {"state": "pending", "reason": None, "attempts": 1}
    manifest.set_status(job_id, genclient.SUBMITTED)
    assert manifest.status[job_id]["attempts"] == 2
    assert manifest.reset_for_resume() == 1


def test_manifest_round_trip(tmp_path, depth_files):
    refs = [DepthRef(f"d/scene_{k}_control.png", f"scene_{k}.png", k) for k in range(2)]
    manifest = genclient.build_ablation_batch(refs, [4, 5], [AblationConfig.BSD, AblationConfig.FULL])
    manifest.set_status(manifest.jobs[0].job_id, genclient.SUBMITTED)
    path = str(tmp_path / "manifest.json")
    manifest.save(path)
    loaded = JobManifest.load(path)
    assert loaded.to_dict() == manifest.to_dict()

    data = manifest.to_dict()
    data["version"] = 7
    with pytest.raises(ValidationError):
        JobManifest.from_dict(data)
    with pytest.raises(ValidationError):
        JobManifest(jobs=[manifest.jobs[0], manifest.jobs[0]])


def test_comfy_graph(depth_files):
    ref = DepthRef("d/scene_1_control.png")
    full = genclient.to_comfy_graph(genclient.build_job(ref, "FULL", 3))
    kinds = [node["class_type"] for node in full.values()]
    assert kinds.count("LoraLoader") == 2
    assert kinds.count("IPAdapterAdvanced") == 2
    assert "ControlNetApply" in kinds
    assert full["sampler"]["inputs"]["seed"] == 3
    assert full["sampler"]["inputs"]["positive"] == ["cn_apply", 0]

    bsd_kinds = [n["class_type"] for n in genclient.to_comfy_graph(genclient.build_job(ref, "BSD", 3)).values()]
    assert not {"LoraLoader", "IPAdapterAdvanced", "ControlNetApply"} & set(bsd_kinds)


def test_resolve_endpoint(monkeypatch):
    monkeypatch.delenv(genclient.ENDPOINT_ENV, raising=False)
    assert genclient.resolve_endpoint(None, "http://cfg") == "http://cfg"
    monkeypatch.setenv(genclient.ENDPOINT_ENV, "http://env")
    assert genclient.resolve_endpoint(None, "http://cfg") == "http://env"
    assert genclient.resolve_endpoint("http://flag", "http://cfg") == "http://flag"


def test_placeholder_references(tmp_path):
    paths = [str(tmp_path / "r" / "one.png"), str(tmp_path / "r" / "two.png")]
    assert genclient.ensure_placeholder_references(paths, size=(4, 4)) == paths
    assert genclient.ensure_placeholder_references(paths) == []


# Submission ------------------------------------------------------------------

class FakeService:
    """httpx handler that answers per job id: PNG by default, or a configured failure."""

    def __init__(self, failures=None):
        self.failures = failures or {}
        self.requests = []

    def __call__(self, request):
        fields = parse_multipart(request.headers["content-type"], request.content)
        job = json.loads(fields["job"][1])
        self.requests.append(job["job_id"])
        failure = self.failures.get(job["job_id"])
        if failure == "connection":
            raise httpx.ConnectError("refused", request=request)
        if failure == "http":
            return httpx.Response(500, content=b"boom")
        if failure == "protocol":
            return httpx.Response(200, content=b"not a png")
        return httpx.Response(200, content=placeholder_png(job["output_size"], job["seed"]))


def _batch(tmp_path, count=4, configs=(AblationConfig.CNET,)):
    paths = _control_images(str(tmp_path / "crops"), count)
    refs = [DepthRef(p, f"scene_{k}_c0.png", k) for k, p in enumerate(paths)]
    return genclient.build_depth_batch(refs, 1, list(configs), _settings(tmp_path))


def test_submit_records_outcomes(tmp_path):
    manifest = _batch(tmp_path)
    ids = [j.job_id for j in manifest.jobs]
    service = FakeService({ids[1]: "http", ids[2]: "protocol", ids[3]: "connection"})
    artifacts = str(tmp_path / "artifacts")
    manifest_path = str(tmp_path / "manifest.json")

    genclient.submit(manifest, artifacts, "http://gen.test", concurrency=2, manifest_path=manifest_path,
                     attempts=3, backoff=0.0, transport=httpx.MockTransport(service))

    assert manifest.state(ids[0]) == genclient.DONE
    assert [manifest.status[i]["reason"] for i in ids[1:]] == ["http 500", "protocol", "connection"]
    assert all(manifest.state(i) == genclient.FAILED for i in ids[1:])
    assert sorted(service.requests) == sorted([ids[0]] + ids[1:] * 3)
    assert os.listdir(artifacts) == [f"{ids[0]}.png"]
    with open(os.path.join(artifacts, f"{ids[0]}.png"), "rb") as f:
        assert f.read().startswith(genclient.PNG_SIGNATURE)
    assert JobManifest.load(manifest_path).to_dict() == manifest.to_dict()
    assert manifest.endpoint == "http://gen.test"


def test_submit_resumes_without_reposting_done_jobs(tmp_path):
    manifest = _batch(tmp_path)
    ids = [j.job_id for j in manifest.jobs]
    artifacts = str(tmp_path / "artifacts")
    genclient.submit(manifest, artifacts, "http://gen.test", backoff=0.0,
                     transport=httpx.MockTransport(FakeService({ids[2]: "http"})))
    # an interrupted run leaves a job in "submitted"
    manifest.status[ids[3]]["state"] = genclient.SUBMITTED

    retry = FakeService()
    genclient.submit(manifest, artifacts, "http://gen.test", backoff=0.0, transport=httpx.MockTransport(retry))
    assert sorted(retry.requests) == sorted([ids[2], ids[3]])
    assert manifest.counts()[genclient.DONE] == 4
    assert manifest.status[ids[2]]["attempts"] == 2


def test_submit_missing_input_fails_without_request(tmp_path):
    manifest = _batch(tmp_path, count=2)
    os.remove(manifest.jobs[0].control_image)
    service = FakeService()
    genclient.submit(manifest, str(tmp_path / "artifacts"), "http://gen.test", backoff=0.0,
                     transport=httpx.MockTransport(service))
    assert manifest.state(manifest.jobs[0].job_id) == genclient.FAILED
    assert manifest.status[manifest.jobs[0].job_id]["reason"].startswith("missing input")
    assert service.requests == [manifest.jobs[1].job_id]


def test_submit_sends_attachments(tmp_path):
    manifest = _batch(tmp_path, count=1, configs=(AblationConfig.FULL,))
    seen = {}

    def handler(request):
        fields = parse_multipart(request.headers["content-type"], request.content)
        seen.update(fields)
        return httpx.Response(200, content=placeholder_png((4, 4)))

    genclient.submit(manifest, str(tmp_path / "artifacts"), "http://gen.test", backoff=0.0,
                     transport=httpx.MockTransport(handler))
    assert set(seen) == {"job", "control_image", "reference_0", "reference_1"}
    job = json.loads(seen["job"][1])
    assert job == manifest.jobs[0].to_dict()


# Pairing ---------------------------------------------------------------------

def _paired_setup(tmp_path):
    images = [annotate.image_entry(k + 1, f"scene_{k}_c0", 8, 8, k, control_image=f"scene_{k}_c0_control.png")
              for k in range(2)]
    anns = [{"id": 1, "image_id": 1}, {"id": 2, "image_id": 1}, {"id": 3, "image_id": 2}]
    aset = annotate.AnnotationSet(images, anns)
    _control_images(str(tmp_path / "crops"), 2)
    refs = genclient.depth_refs_from_coco(aset, str(tmp_path / "crops"))
    manifest = genclient.build_depth_batch(refs, 2, [AblationConfig.BSD, AblationConfig.CNET], _settings(tmp_path))
    artifacts = tmp_path / "artifacts"
    artifacts.mkdir()
    for job in manifest.jobs:
        (artifacts / f"{job.job_id}.png").write_bytes(placeholder_png((4, 4)))
    return aset, manifest, artifacts


def test_pair_outputs(tmp_path):
    aset, manifest, artifacts = _paired_setup(tmp_path)
    index = genclient.pair_outputs(str(artifacts), aset, manifest)
    assert len(index) == 2
    assert all(entry["ablation"] == "CNET" for entry in index)
    by_file = {entry["file_name"]: entry for entry in index}
    assert by_file["scene_0_c0.png"]["annotation_ids"] == [1, 2]
    assert by_file["scene_1_c0.png"]["annotation_ids"] == [3]
    assert by_file["scene_1_c0.png"]["scene_seed"] == 1


def test_pair_outputs_reports_orphans(tmp_path):
    aset, manifest, artifacts = _paired_setup(tmp_path)
    cnet = [j for j in manifest.jobs if j.ablation == "CNET"]
    os.remove(artifacts / f"{cnet[0].job_id}.png")
    (artifacts / "CNET-ghost-s1.png").write_bytes(placeholder_png((4, 4)))
    with pytest.raises(PairingError) as excinfo:
        genclient.pair_outputs(str(artifacts), aset, manifest)
    assert excinfo.value.orphan_images == ["CNET-ghost-s1"]
    assert excinfo.value.orphan_annotations == [cnet[0].job_id]
