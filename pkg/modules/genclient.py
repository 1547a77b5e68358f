# modules/genclient.py
"""Depth-conditioned generation jobs, batch manifests and HTTP submission.

Jobs are posted to the generation service as multipart requests: a ``job`` JSON
field plus the control image and IP-Adapter references as PNG attachments. The
service answers with the generated PNG.
"""
import asyncio
import json
import logging
import os
from dataclasses import dataclass, field, replace
from datetime import datetime
from enum import Enum

import httpx
from PIL import Image

from modules.errors import PairingError, StorageError, ValidationError
from modules.storage_utils import read_json, sha256_bytes, write_bytes, write_json
from utils import STREAM_GENERATION, derive_seed

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
ENDPOINT_ENV = "MUSHROOM_GEN_ENDPOINT"
DEFAULT_ENDPOINT = "http://127.0.0.1:8188"
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

DEFAULT_PROMPT = "white button mushrooms on dark black soil compost mycelium"

PENDING, SUBMITTED, DONE, FAILED = "pending", "submitted", "done", "failed"
TRANSITIONS = {PENDING: {SUBMITTED}, SUBMITTED: {DONE, FAILED}, DONE: set(), FAILED: set()}


@dataclass(frozen=True)
class LoraSpec:
    name: str
    trigger_words: tuple
    weight: float = 1.0

    def to_dict(self):
        return {"name": self.name, "weight": self.weight, "trigger_words": list(self.trigger_words)}


LORA_MUSHROOM = LoraSpec("white_button_mushroom", ("white button mushroom",))
LORA_COMPOST = LoraSpec("compost_mycelium", ("compost mycelium",))


class AblationConfig(Enum):
    """Component flags: (controlnet, ip_adapter, mushroom LoRA, compost LoRA)."""
    BSD = (False, False, False, False)
    CNET = (True, False, False, False)
    CNET_IP = (True, True, False, False)
    CNET_L1 = (True, False, True, False)
    CNET_L2 = (True, False, False, True)
    CNET_IP_L1 = (True, True, True, False)
    CNET_IP_L2 = (True, True, False, True)
    CNET_L1_L2 = (True, False, True, True)
    FULL = (True, True, True, True)

    @property
    def controlnet(self):
        return self.value[0]

    @property
    def ip_adapter(self):
        return self.value[1]

    @property
    def lora_mushroom(self):
        return self.value[2]

    @property
    def lora_compost(self):
        return self.value[3]

    @property
    def label(self):
        if self is AblationConfig.BSD:
            return "BSD"
        parts = ["CNET", "IP" if self.ip_adapter else None,
                 "L1" if self.lora_mushroom else None, "L2" if self.lora_compost else None]
        return "+".join(p for p in parts if p)

    @classmethod
    def parse(cls, name):
        key = name.strip().upper().replace("+", "_")
        try:
            return cls[key]
        except KeyError:
            raise ValidationError(f"unknown ablation config {name!r}; expected one of "
                                  f"{', '.join(c.name for c in cls)}") from None


@dataclass(frozen=True)
class GenerationSettings:
    prompt: str = DEFAULT_PROMPT
    negative_prompt: str = ""
    control_strength: float = 1.0
    ip_weight: float = 0.5
    ip_references: tuple = ("references/style_1.png", "references/style_2.png")
    lora_weight: float = 1.0
    sampler_steps: int = 30
    output_size: tuple = (1024, 1024)

    def __post_init__(self):
        if not 0.0 <= self.control_strength <= 1.0:
            raise ValidationError("control_strength must lie in [0, 1]")
        if not 0.0 <= self.ip_weight <= 1.0:
            raise ValidationError("ip_weight must lie in [0, 1]")
        if not 0.0 <= self.lora_weight <= 2.0:
            raise ValidationError("lora_weight must lie in [0, 2]")
        if self.sampler_steps < 1:
            raise ValidationError("sampler_steps must be at least 1")


DEFAULT_SETTINGS = GenerationSettings()


@dataclass(frozen=True)
class DepthRef:
    """A control image plus where it came from."""
    path: str
    image_file: str = None
    scene_seed: int = None
    window: tuple = None

    @property
    def stem(self):
        name = os.path.splitext(os.path.basename(self.path))[0]
        return name[:-len("_control")] if name.endswith("_control") else name

    def provenance(self):
        return {
            "depth": self.path,
            "image": self.image_file,
            "scene_seed": self.scene_seed,
            "window": list(self.window) if self.window is not None else None,
        }


@dataclass
class GenerationJob:
    job_id: str
    ablation: str
    prompt: str
    negative_prompt: str
    seed: int
    control_image: str = None
    control_strength: float = 1.0
    ip_adapter: dict = None
    loras: list = field(default_factory=list)
    output_size: tuple = (1024, 1024)
    sampler_steps: int = 30
    provenance: dict = field(default_factory=dict)

    @property
    def config(self):
        return AblationConfig[self.ablation]

    def to_dict(self):
        return {
            "job_id": self.job_id,
            "ablation": self.ablation,
            "prompt": self.prompt,
            "negative_prompt": self.negative_prompt,
            "seed": self.seed,
            "controlnet": ({"image": self.control_image, "strength": self.control_strength}
                           if self.control_image is not None else None),
            "ip_adapter": self.ip_adapter,
            "loras": self.loras,
            "output_size": list(self.output_size),
            "sampler_steps": self.sampler_steps,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data):
        control = data.get("controlnet")
        return cls(
            job_id=data["job_id"],
            ablation=data["ablation"],
            prompt=data["prompt"],
            negative_prompt=data.get("negative_prompt", ""),
            seed=int(data["seed"]),
            control_image=control["image"] if control else None,
            control_strength=control["strength"] if control else 1.0,
            ip_adapter=data.get("ip_adapter"),
            loras=list(data.get("loras", [])),
            output_size=tuple(data.get("output_size", (1024, 1024))),
            sampler_steps=int(data.get("sampler_steps", 30)),
            provenance=dict(data.get("provenance", {})),
        )

    def validate(self):
        config = self.config
        if config.controlnet != (self.control_image is not None):
            raise ValidationError(f"job {self.job_id}: control image must be present iff ControlNet is active")
        check_trigger_words(self.prompt, self.loras, self.job_id)


def check_trigger_words(prompt, loras, job_id=""):
    text = prompt.lower()
    for lora in loras:
        missing = [w for w in lora["trigger_words"] if w.lower() not in text]
        if missing:
            raise ValidationError(
                f"job {job_id}: prompt lacks trigger words {missing} for LoRA {lora['name']!r}")


def build_job(depth, config, seed, prompt=None, settings=DEFAULT_SETTINGS, suffix=""):
    """One generation job for a depth reference under an ablation config.

    ``depth`` may be a path, a DepthRef or None (only valid for BSD). BSD jobs keep
    the depth provenance but carry no control image.
    """
    if isinstance(config, str):
        config = AblationConfig.parse(config)
    if isinstance(depth, str):
        depth = DepthRef(depth)
    if config.controlnet and depth is None:
        raise ValidationError(f"{config.name} needs a depth control image")
    if config.controlnet and not os.path.exists(depth.path):
        raise ValidationError(f"{config.name}: depth control image {depth.path} does not exist")

    loras = []
    if config.lora_mushroom:
        loras.append(replace(LORA_MUSHROOM, weight=settings.lora_weight).to_dict())
    if config.lora_compost:
        loras.append(replace(LORA_COMPOST, weight=settings.lora_weight).to_dict())

    stem = depth.stem if depth is not None else "none"
    job = GenerationJob(
        job_id=f"{config.name}-{stem}-s{seed}{suffix}",
        ablation=config.name,
        prompt=settings.prompt if prompt is None else prompt,
        negative_prompt=settings.negative_prompt,
        seed=int(seed),
        control_image=depth.path if config.controlnet else None,
        control_strength=settings.control_strength,
        ip_adapter=({"references": list(settings.ip_references), "weight": settings.ip_weight}
                    if config.ip_adapter else None),
        loras=loras,
        output_size=tuple(settings.output_size),
        sampler_steps=settings.sampler_steps,
        provenance=depth.provenance() if depth is not None else {},
    )
    job.validate()
    return job


@dataclass
class JobManifest:
    jobs: list
    endpoint: str = DEFAULT_ENDPOINT
    batch_id: str = None
    created: str = None
    status: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [j.job_id for j in self.jobs]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate job ids: {dupes}")
        if self.batch_id is None:
            self.batch_id = "batch-" + sha256_bytes("\n".join(ids).encode("utf-8"))[:12]
        if self.created is None:
            self.created = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
        for job_id in ids:
            self.status.setdefault(job_id, {"state": PENDING, "reason": None, "attempts": 0})

    def job(self, job_id):
        for j in self.jobs:
            if j.job_id == job_id:
                return j
        raise KeyError(job_id)

    def state(self, job_id):
        return self.status[job_id]["state"]

    def set_status(self, job_id, state, reason=None):
        current = self.state(job_id)
        if state not in TRANSITIONS[current]:
            raise ValidationError(f"job {job_id}: illegal status change {current} -> {state}")
        entry = self.status[job_id]
        entry["state"] = state
        entry["reason"] = reason
        if state == SUBMITTED:
            entry["attempts"] = entry.get("attempts", 0) + 1

    def reset_for_resume(self):
        """Failed and interrupted (submitted) jobs go back to pending; returns how many."""
        count = 0
        for entry in self.status.values():
            if entry["state"] in (FAILED, SUBMITTED):
                entry["state"] = PENDING
                entry["reason"] = None
                count += 1
        return count

    def pending_jobs(self):
        return [j for j in self.jobs if self.state(j.job_id) == PENDING]

    def counts(self):
        totals = {PENDING: 0, SUBMITTED: 0, DONE: 0, FAILED: 0}
        for entry in self.status.values():
            totals[entry["state"]] += 1
        return totals

    def to_dict(self):
        return {
            "version": MANIFEST_SCHEMA_VERSION,
            "batch_id": self.batch_id,
            "created": self.created,
            "endpoint": self.endpoint,
            "jobs": [j.to_dict() for j in self.jobs],
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("version") != MANIFEST_SCHEMA_VERSION:
            raise ValidationError(f"unsupported manifest version {data.get('version')!r}")
        return cls(
            jobs=[GenerationJob.from_dict(j) for j in data["jobs"]],
            endpoint=data.get("endpoint", DEFAULT_ENDPOINT),
            batch_id=data.get("batch_id"),
            created=data.get("created"),
            status={k: dict(v) for k, v in data.get("status", {}).items()},
        )

    def save(self, path):
        return write_json(path, self.to_dict())

    @classmethod
    def load(cls, path):
        return cls.from_dict(read_json(path))


def generation_seed(master_seed, image_index, k=0):
    """32-bit sampler seed of the k-th generation of one depth map."""
    return derive_seed(master_seed, STREAM_GENERATION, image_index, k) % 2 ** 32


def build_depth_batch(depth_refs, master_seed, configs, settings=DEFAULT_SETTINGS, endpoint=DEFAULT_ENDPOINT,
                      seeds_per_depth=1):
    """Ablation batch with ``seeds_per_depth`` derived seeds for every depth map."""
    expanded = [ref for ref in depth_refs for _ in range(seeds_per_depth)]
    seeds = [generation_seed(master_seed, i, k) for i in range(len(depth_refs)) for k in range(seeds_per_depth)]
    return build_ablation_batch(expanded, seeds, configs, settings, endpoint)


def depth_refs_from_coco(aset, image_dir):
    """One DepthRef per image of an annotation set, pointing at its control image."""
    refs = []
    for img in aset.images:
        control = img.get("control_image")
        if not control:
            raise ValidationError(f"image {img['file_name']} has no control image")
        window = img.get("window")
        refs.append(DepthRef(os.path.join(image_dir, control), img["file_name"],
                             img.get("scene_seed"), tuple(window) if window else None))
    return refs


def build_ablation_batch(depth_refs, seeds, configs=tuple(AblationConfig), settings=DEFAULT_SETTINGS,
                         endpoint=DEFAULT_ENDPOINT):
    """One job per (config, depth, seed); every config sees the same prompts and seeds."""
    if len(depth_refs) != len(seeds):
        raise ValidationError(f"{len(depth_refs)} depth refs but {len(seeds)} seeds")
    jobs = [build_job(depth, config, seed, settings=settings)
            for config in configs
            for depth, seed in zip(depth_refs, seeds)]
    return JobManifest(jobs=jobs, endpoint=endpoint)


def build_prompt_sweep(depth, seed, prompts=(), reference_sets=(), config=AblationConfig.FULL,
                       settings=DEFAULT_SETTINGS):
    """Jobs sharing seed and depth, varying the text prompt or the IP-Adapter references."""
    jobs = [build_job(depth, config, seed, prompt=p, settings=settings, suffix=f"-p{k}")
            for k, p in enumerate(prompts)]
    for k, refs in enumerate(reference_sets):
        jobs.append(build_job(depth, config, seed, settings=replace(settings, ip_references=tuple(refs)),
                              suffix=f"-r{k}"))
    return jobs


def build_seed_sweep(depth, seeds, config=AblationConfig.FULL, settings=DEFAULT_SETTINGS):
    """Several generations of one depth map, for augmentation."""
    return [build_job(depth, config, s, settings=settings) for s in seeds]


def ensure_placeholder_references(paths, size=(512, 512)):
    """Write flat grey PNGs for missing style references; returns the created paths."""
    created = []
    for k, path in enumerate(paths):
        if os.path.exists(path):
            continue
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        shade = 60 + 40 * k
        Image.new("RGB", tuple(size), (shade, shade - 10, shade - 20)).save(path)
        created.append(path)
    return created


def resolve_endpoint(flag=None, configured=DEFAULT_ENDPOINT):
    """CLI flag, then $MUSHROOM_GEN_ENDPOINT, then the configured value."""
    return flag or os.environ.get(ENDPOINT_ENV) or configured


def to_comfy_graph(job, checkpoint="sd_xl_base_1.0.safetensors",
                   controlnet_model="controlnet-depth-sdxl.safetensors",
                   ip_adapter_model="ip-adapter_sdxl.safetensors"):
    """Translate a job into a ComfyUI-style prompt graph (node id -> {class_type, inputs})."""
    graph = {"1": {"class_type": "CheckpointLoaderSimple", "inputs": {"ckpt_name": checkpoint}}}
    model, clip = ["1", 0], ["1", 1]
    next_id = 2
    for lora in job.loras:
        graph[str(next_id)] = {"class_type": "LoraLoader", "inputs": {
            "lora_name": f"{lora['name']}.safetensors", "strength_model": lora["weight"],
            "strength_clip": lora["weight"], "model": model, "clip": clip}}
        model, clip = [str(next_id), 0], [str(next_id), 1]
        next_id += 1
    if job.ip_adapter:
        for ref in job.ip_adapter["references"]:
            graph[str(next_id)] = {"class_type": "LoadImage", "inputs": {"image": os.path.basename(ref)}}
            graph[str(next_id + 1)] = {"class_type": "IPAdapterAdvanced", "inputs": {
                "model": model, "image": [str(next_id), 0], "weight": job.ip_adapter["weight"],
                "ipadapter_file": ip_adapter_model}}
            model = [str(next_id + 1), 0]
            next_id += 2
    graph["pos"] = {"class_type": "CLIPTextEncode", "inputs": {"text": job.prompt, "clip": clip}}
    graph["neg"] = {"class_type": "CLIPTextEncode", "inputs": {"text": job.negative_prompt, "clip": clip}}
    positive = ["pos", 0]
    if job.control_image:
        graph["cn_image"] = {"class_type": "LoadImage", "inputs": {"image": os.path.basename(job.control_image)}}
        graph["cn_model"] = {"class_type": "ControlNetLoader", "inputs": {"control_net_name": controlnet_model}}
        graph["cn_apply"] = {"class_type": "ControlNetApply", "inputs": {
            "conditioning": positive, "control_net": ["cn_model", 0], "image": ["cn_image", 0],
            "strength": job.control_strength}}
        positive = ["cn_apply", 0]
    width, height = job.output_size
    graph["latent"] = {"class_type": "EmptyLatentImage", "inputs": {"width": width, "height": height, "batch_size": 1}}
    graph["sampler"] = {"class_type": "KSampler", "inputs": {
        "model": model, "positive": positive, "negative": ["neg", 0], "latent_image": ["latent", 0],
        "seed": job.seed, "steps": job.sampler_steps, "cfg": 7.0, "sampler_name": "euler",
        "scheduler": "normal", "denoise": 1.0}}
    graph["decode"] = {"class_type": "VAEDecode", "inputs": {"samples": ["sampler", 0], "vae": ["1", 2]}}
    graph["save"] = {"class_type": "SaveImage", "inputs": {"images": ["decode", 0], "filename_prefix": job.job_id}}
    return graph


def _attachments(job):
    files = []
    if job.control_image:
        files.append(("control_image", job.control_image))
    if job.ip_adapter:
        files.extend((f"reference_{k}", ref) for k, ref in enumerate(job.ip_adapter["references"]))
    payload = []
    for name, path in files:
        try:
            with open(path, "rb") as f:
                payload.append((name, (os.path.basename(path), f.read(), "image/png")))
        except OSError as e:
            raise StorageError(f"cannot read attachment {path}: {e}") from e
    return payload


async def _post_job(client, url, job, artifacts_dir, attempts, backoff):
    """Returns (state, reason)."""
    try:
        files = _attachments(job)
    except StorageError as e:
        return FAILED, f"missing input: {e}"
    reason = None
    for attempt in range(attempts):
        if attempt:
            await asyncio.sleep(backoff * 2 ** (attempt - 1))
        try:
            response = await client.post(url, data={"job": json.dumps(job.to_dict(), sort_keys=True)},
                                         files=files or None)
        except httpx.TransportError as e:
            reason = "connection"
            logger.debug("job %s attempt %d: %s", job.job_id, attempt + 1, e)
            continue
        if response.status_code != 200:
            reason = f"http {response.status_code}"
            continue
        if not response.content.startswith(PNG_SIGNATURE):
            reason = "protocol"
            continue
        write_bytes(os.path.join(artifacts_dir, f"{job.job_id}.png"), response.content)
        return DONE, None
    return FAILED, reason


async def submit_async(manifest, artifacts_dir, endpoint=None, concurrency=4, manifest_path=None,
                       attempts=3, backoff=0.5, timeout=60.0, transport=None, progress=None):
    endpoint = endpoint or manifest.endpoint
    manifest.endpoint = endpoint
    url = endpoint.rstrip("/") + "/generate"
    os.makedirs(artifacts_dir, exist_ok=True)
    semaphore = asyncio.Semaphore(max(1, concurrency))
    writer = asyncio.Lock()

    async def record(job_id, state, reason=None):
        async with writer:
            manifest.set_status(job_id, state, reason)
            if manifest_path:
                manifest.save(manifest_path)

    async with httpx.AsyncClient(timeout=timeout, transport=transport) as client:
        async def run(job):
            async with semaphore:
                await record(job.job_id, SUBMITTED)
                state, reason = await _post_job(client, url, job, artifacts_dir, attempts, backoff)
                await record(job.job_id, state, reason)
                if state == FAILED:
                    logger.warning("job %s failed: %s", job.job_id, reason)
                if progress is not None:
                    progress.update(1)

        await asyncio.gather(*(run(job) for job in manifest.pending_jobs()))
    return manifest


def submit(manifest, artifacts_dir, endpoint=None, concurrency=4, manifest_path=None,
           attempts=3, backoff=0.5, timeout=60.0, transport=None, progress=None):
    """Post every job that is not done; failures are recorded per job, never raised.

    Failed or interrupted jobs from an earlier run are retried, done jobs are not.
    The manifest is written after every status change when ``manifest_path`` is set.
    """
    resumed = manifest.reset_for_resume()
    pending = len(manifest.pending_jobs())
    if manifest_path:
        manifest.save(manifest_path)
    asyncio.run(submit_async(manifest, artifacts_dir, endpoint, concurrency, manifest_path,
                             attempts, backoff, timeout, transport, progress))
    counts = manifest.counts()
    logger.info("stage=submit posted=%d resumed=%d done=%d failed=%d",
                pending, resumed, counts[DONE], counts[FAILED])
    return manifest


def pair_outputs(artifacts_dir, aset, manifest):
    """Index generated images against their annotated source images.

    BSD jobs are skipped (nothing ties their output to the geometry). Raises
    PairingError when an artifact has no annotated image, or when an annotated
    image's job produced no artifact.
    """
    images = {img["file_name"]: img for img in aset.images}
    by_image = aset.annotations_by_image()
    jobs = {j.job_id: j for j in manifest.jobs if j.ablation != AblationConfig.BSD.name}

    orphan_images, orphan_annotations, index = [], [], []
    present = set()
    if os.path.isdir(artifacts_dir):
        present = {os.path.splitext(f)[0] for f in os.listdir(artifacts_dir) if f.endswith(".png")}

    for job_id in sorted(present):
        if job_id not in jobs:
            if job_id.startswith(AblationConfig.BSD.name + "-"):
                continue
            orphan_images.append(job_id)
            continue
        image = images.get(jobs[job_id].provenance.get("image"))
        if image is None:
            orphan_images.append(job_id)
            continue
        provenance = jobs[job_id].provenance
        index.append({
            "artifact": os.path.join(artifacts_dir, f"{job_id}.png"),
            "job_id": job_id,
            "ablation": jobs[job_id].ablation,
            "seed": jobs[job_id].seed,
            "image_id": image["id"],
            "file_name": image["file_name"],
            "scene_seed": provenance.get("scene_seed"),
            "window": provenance.get("window"),
            "annotation_ids": [a["id"] for a in by_image.get(image["id"], [])],
        })

    for job_id, job in sorted(jobs.items()):
        if job_id not in present and job.provenance.get("image") in images:
            orphan_annotations.append(job_id)

    if orphan_images or orphan_annotations:
        raise PairingError(
            f"pairing failed: images without annotations {orphan_images}, "
            f"annotated images without artifacts {orphan_annotations}",
            orphan_images, orphan_annotations)
    return index
