# modules/annotate.py
"""COCO annotations from rendered id maps, plus fixed crops and SAHI-style tiles.

Masks are stored as COCO compressed RLE through pycocotools.mask: column-major
run lengths starting with a background run.
"""
import logging
import os
from dataclasses import dataclass, field
from itertools import zip_longest

import numpy as np
import pandas as pd
import pycocotools.mask as mask_util

from modules import procgen
from modules.errors import ConfigurationError, ConsistencyError
from modules.render import extract_masks
from modules.storage_utils import read_json, write_json, write_png
from utils import STREAM_CROP, SeedStream

logger = logging.getLogger(__name__)

CATEGORY = {"id": 1, "name": "white_button_mushroom", "supercategory": "mushroom"}
REFERENCE_MEAN_INSTANCES = 145.0
LAYERS = ("depth", "control", "ids", "preview")


# RLE ----------------------------------------------------------------------

def rle_runs(mask):
    """Column-major run lengths; the first run counts background pixels (possibly 0)."""
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    if flat.size == 0:
        raise ConfigurationError("cannot encode an empty mask")
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    runs = np.diff(np.concatenate([[0], change, [flat.size]]))
    if flat[0]:
        runs = np.concatenate([[0], runs])
    return runs.astype(np.int64)


def compress_runs(runs, shape):
    """Compressed counts string of column-major ``runs`` over an (H, W) image."""
    h, w = int(shape[0]), int(shape[1])
    rle = mask_util.frPyObjects({"size": [h, w], "counts": [int(r) for r in runs]}, h, w)
    return rle["counts"].decode("ascii")


def _run_total(counts):
    """Pixels covered by a compressed counts string; None when it is malformed."""
    runs = []
    p = 0
    while p < len(counts):
        x, k, more = 0, 0, True
        while more:
            if p >= len(counts):
                return None
            c = ord(counts[p]) - 48
            if not 0 <= c < 64:
                return None
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and c & 0x10:
                x |= -1 << (5 * k)
        if len(runs) > 2:
            x += runs[-2]
        if x < 0:
            return None
        runs.append(x)
    return sum(runs)


def coco_rle(counts, shape):
    """pycocotools RLE object for a counts string, checked against ``shape``.

    pycocotools.mask.decode does not bound-check run totals.
    """
    h, w = int(shape[0]), int(shape[1])
    total = _run_total(counts)
    if total != h * w:
        raise ConsistencyError(f"RLE runs cover {total} pixels, expected {h * w}")
    return {"size": [h, w], "counts": counts.encode("ascii")}


def encode_rle(mask):
    """Compressed COCO RLE string of a binary mask."""
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0:
        raise ConfigurationError("cannot encode an empty mask")
    return mask_util.encode(np.asfortranarray(mask.astype(np.uint8)))["counts"].decode("ascii")


def decode_rle(counts, shape):
    """Binary (H, W) mask from a compressed RLE string."""
    return mask_util.decode(coco_rle(counts, shape)).astype(bool)


def encode_window_mask(local, bbox, shape):
    """RLE of a mask given only inside its bbox, without building the full image.

    Columns outside the bbox are pure background, so they just lengthen the first
    and last background runs.
    """
    x, y, w, h = bbox
    height, width = shape
    slab = np.zeros((height, w), dtype=bool)
    slab[y:y + h] = local
    runs = rle_runs(slab)
    runs[0] += x * height
    trailing = (width - x - w) * height
    if len(runs) % 2 == 1:
        runs[-1] += trailing
    elif trailing:
        runs = np.concatenate([runs, [trailing]])
    return compress_runs(runs, shape)


def segmentation(counts, shape):
    return {"size": [int(shape[0]), int(shape[1])], "counts": counts}


def rle_area(rle):
    return int(mask_util.area(rle))


def rle_bbox(rle):
    """Tight [x, y, w, h] of an RLE object; None when it is empty."""
    if rle_area(rle) == 0:
        return None
    return [int(v) for v in mask_util.toBbox(rle)]


def mask_to_bbox(mask):
    """Tight [x, y, w, h] of a binary mask; None when empty."""
    mask = np.asarray(mask, dtype=bool)
    return rle_bbox(mask_util.encode(np.asfortranarray(mask.astype(np.uint8))))


# Annotation sets ------------------------------------------------------------

@dataclass
class AnnotationSet:
    images: list = field(default_factory=list)
    annotations: list = field(default_factory=list)
    categories: list = field(default_factory=lambda: [dict(CATEGORY)])
    description: str = "synthetic mushroom bed"

    def to_dict(self):
        return {
            "info": {"description": self.description, "version": 1},
            "images": self.images,
            "categories": self.categories,
            "annotations": self.annotations,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            images=list(data.get("images", [])),
            annotations=list(data.get("annotations", [])),
            categories=list(data.get("categories", [dict(CATEGORY)])),
            description=data.get("info", {}).get("description", ""),
        )

    def save(self, path):
        return write_json(path, self.to_dict())

    @classmethod
    def load(cls, path):
        return cls.from_dict(read_json(path))

    def annotations_by_image(self):
        grouped = {img["id"]: [] for img in self.images}
        for ann in self.annotations:
            grouped.setdefault(ann["image_id"], []).append(ann)
        return grouped

    def validate(self, check_masks=False):
        """Raise ConsistencyError on dangling image ids or bbox/area mismatches."""
        images = {img["id"]: img for img in self.images}
        for ann in self.annotations:
            img = images.get(ann["image_id"])
            if img is None:
                raise ConsistencyError(f"annotation {ann['id']} references missing image {ann['image_id']}")
            if check_masks:
                rle = coco_rle(ann["segmentation"]["counts"], (img["height"], img["width"]))
                if rle_bbox(rle) != list(ann["bbox"]) or rle_area(rle) != ann["area"]:
                    raise ConsistencyError(f"annotation {ann['id']} bbox/area disagree with its mask")


def image_entry(image_id, stem, width, height, scene_seed, window=None, **extra):
    entry = {
        "id": image_id,
        "file_name": f"{stem}.png",
        "width": int(width),
        "height": int(height),
        "stem": stem,
        "scene_seed": scene_seed,
        "window": list(window) if window is not None else [0, 0, int(width), int(height)],
    }
    entry.update(extra)
    return entry


def export_coco(renders, scenes, output_path=None):
    """One image per render and one annotation per visible instance.

    Annotations are ordered by (image_id, instance_id) and numbered from 1.
    Both arguments may be lazy iterables; they must have the same length.
    """
    aset = AnnotationSet()
    ann_id = 1
    for image_id, (render, scene) in enumerate(zip_longest(renders, scenes), start=1):
        if render is None or scene is None:
            raise ConsistencyError(f"renders and scene descriptors differ in number (at image {image_id})")
        height, width = render.ids.shape
        stem = f"scene_{scene.seed}"
        aset.images.append(image_entry(image_id, stem, width, height, scene.seed,
                                       control_image=f"{stem}_control.png"))
        by_id = {p.instance_id: p for p in scene.placements}
        ages = procgen.bank_ages(scene.bank_config.rows, scene.bank_config.per_row)
        for m in extract_masks(render.ids):
            placement = by_id.get(m.instance_id)
            if placement is None:
                raise ConsistencyError(f"id map of scene {scene.seed} holds unknown instance {m.instance_id}")
            aset.annotations.append({
                "id": ann_id,
                "image_id": image_id,
                "category_id": CATEGORY["id"],
                "bbox": list(m.bbox),
                "area": m.area,
                "iscrowd": 0,
                "segmentation": segmentation(encode_window_mask(m.mask, m.bbox, (height, width)),
                                             (height, width)),
                "extra": {
                    "scene_seed": scene.seed,
                    "instance_id": m.instance_id,
                    "variant_index": placement.variant_index,
                    "age": ages[placement.variant_index],
                },
            })
            ann_id += 1
    if output_path:
        aset.save(output_path)
    logger.info("stage=annotate images=%d annotations=%d", len(aset.images), len(aset.annotations))
    return aset


# Windows --------------------------------------------------------------------

@dataclass(frozen=True)
class Window:
    x: int
    y: int
    w: int
    h: int

    def as_list(self):
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class TileSpec:
    tile_size: tuple = (512, 512)
    overlap_fraction: float = 0.2
    min_visible_area: int = 16
    min_visibility_ratio: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ConfigurationError(f"overlap_fraction must lie in [0, 1), got {self.overlap_fraction}")
        if min(self.tile_size) <= 0:
            raise ConfigurationError(f"tile_size must be positive, got {self.tile_size}")


@dataclass(frozen=True)
class CropSpec:
    crop_size: tuple = (1024, 1024)
    count: int = 3
    jitter: int = 0
    min_visible_area: int = 16
    min_visibility_ratio: float = 0.1

    def __post_init__(self):
        if self.count < 1:
            raise ConfigurationError("crop count must be at least 1")
        if self.jitter < 0:
            raise ConfigurationError("crop jitter must be non-negative")


def crop_windows(width, height, spec=CropSpec(), seed=0):
    """Evenly spaced crops from left to right, vertically centred."""
    cw, ch = spec.crop_size
    if cw > width or ch > height:
        raise ConfigurationError(f"crop {cw}x{ch} does not fit a {width}x{height} image")
    y = (height - ch) // 2
    windows = []
    for k in range(spec.count):
        x = round(k * (width - cw) / (spec.count - 1)) if spec.count > 1 else (width - cw) // 2
        wy = y
        if spec.jitter:
            dx, dy = SeedStream(seed, STREAM_CROP, k).rng.integers(-spec.jitter, spec.jitter + 1, size=2)
            x = int(np.clip(x + dx, 0, width - cw))
            wy = int(np.clip(y + dy, 0, height - ch))
        windows.append(Window(int(x), int(wy), cw, ch))
    return windows


def _starts(length, tile, stride):
    starts = list(range(0, length - tile + 1, stride))
    if starts[-1] != length - tile:
        starts.append(length - tile)
    return starts


def tile_windows(width, height, spec=TileSpec()):
    """Sliding windows with the last row and column flush to the image edge."""
    tw, th = spec.tile_size
    if tw > width or th > height:
        raise ConfigurationError(f"tile {tw}x{th} does not fit a {width}x{height} image")
    stride_x = tw - int(tw * spec.overlap_fraction)
    stride_y = th - int(th * spec.overlap_fraction)
    return [Window(x, y, tw, th)
            for y in _starts(height, th, stride_y)
            for x in _starts(width, tw, stride_x)]


@dataclass
class SourceImage:
    """One annotated image with its per-pixel layers (any subset of LAYERS)."""
    image: dict
    annotations: list
    layers: dict = field(default_factory=dict)


@dataclass
class WindowOutput:
    source: dict
    window: Window
    image: dict
    annotations: list
    layers: dict


def _decoded_crops(source):
    """Each annotation decoded once and cropped to its bbox."""
    shape = (source.image["height"], source.image["width"])
    crops = []
    for ann in source.annotations:
        x, y, w, h = ann["bbox"]
        mask = decode_rle(ann["segmentation"]["counts"], shape)
        crops.append(mask[y:y + h, x:x + w])
    return crops


def clip_to_windows(source, windows, min_visible_area=16, min_visibility_ratio=0.1, suffix="w"):
    """Slice layers and annotations of ``source`` into ``windows``.

    Clipped annotations smaller than ``min_visible_area`` pixels, or keeping less
    than ``min_visibility_ratio`` of their original area, are dropped.
    """
    decoded = _decoded_crops(source)
    base = source.image
    outputs = []
    for k, win in enumerate(windows):
        stem = f"{base['stem']}_{suffix}{k}"
        entry = image_entry(0, stem, win.w, win.h, base.get("scene_seed"), window=win.as_list(),
                            source_file=base["file_name"], control_image=f"{stem}_control.png")
        kept = []
        for ann, local in zip(source.annotations, decoded):
            ax, ay, aw, ah = ann["bbox"]
            x0, y0 = max(ax, win.x), max(ay, win.y)
            x1, y1 = min(ax + aw, win.x + win.w), min(ay + ah, win.y + win.h)
            if x0 >= x1 or y0 >= y1:
                continue
            part = local[y0 - ay:y1 - ay, x0 - ax:x1 - ax]
            area = int(part.sum())
            if area == 0 or area < min_visible_area or area < min_visibility_ratio * ann["area"]:
                continue
            rows = np.flatnonzero(part.any(axis=1))
            cols = np.flatnonzero(part.any(axis=0))
            tight = part[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
            bbox = (int(x0 - win.x + cols[0]), int(y0 - win.y + rows[0]), tight.shape[1], tight.shape[0])
            clipped = {key: value for key, value in ann.items() if key not in ("id", "image_id")}
            clipped.update({
                "bbox": list(bbox),
                "area": area,
                "segmentation": segmentation(encode_window_mask(tight, bbox, (win.h, win.w)), (win.h, win.w)),
            })
            clipped["extra"] = dict(ann.get("extra", {}), source_annotation=ann["id"],
                                    visibility=area / ann["area"])
            kept.append(clipped)
        layers = {name: arr[win.y:win.y + win.h, win.x:win.x + win.w] for name, arr in source.layers.items()}
        outputs.append(WindowOutput(base, win, entry, kept, layers))
    return outputs


def crop_fixed(source, spec=CropSpec(), seed=0):
    windows = crop_windows(source.image["width"], source.image["height"], spec, seed)
    return clip_to_windows(source, windows, spec.min_visible_area, spec.min_visibility_ratio, suffix="c")


def tile_sahi(source, spec=TileSpec()):
    windows = tile_windows(source.image["width"], source.image["height"], spec)
    return clip_to_windows(source, windows, spec.min_visible_area, spec.min_visibility_ratio, suffix="t")


def tiles_to_coco(outputs, description="synthetic mushroom bed tiles"):
    """Renumber window outputs into one AnnotationSet."""
    aset = AnnotationSet(description=description)
    ann_id = 1
    for image_id, out in enumerate(outputs, start=1):
        aset.images.append(dict(out.image, id=image_id))
        for ann in out.annotations:
            aset.annotations.append(dict(ann, id=ann_id, image_id=image_id))
            ann_id += 1
    return aset


def write_window_layers(outputs, directory):
    """Save sliced layers as ``{stem}_{layer}.png``; returns the written paths."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for out in outputs:
        for name, arr in out.layers.items():
            path = os.path.join(directory, f"{out.image['stem']}_{name}.png")
            write_png(path, arr)
            paths.append(path)
    return paths


def dataset_stats(aset, reference_mean=REFERENCE_MEAN_INSTANCES, bins=20):
    """Counts, per-image instance mean/median and an area histogram."""
    image_ids = [img["id"] for img in aset.images]
    if aset.annotations:
        frame = pd.DataFrame({"image_id": [a["image_id"] for a in aset.annotations],
                              "area": [a["area"] for a in aset.annotations]})
    else:
        frame = pd.DataFrame({"image_id": pd.Series(dtype=int), "area": pd.Series(dtype=int)})
    per_image = frame.groupby("image_id").size().reindex(image_ids, fill_value=0)

    if len(frame):
        counts, edges = np.histogram(frame["area"].to_numpy(), bins=bins)
    else:
        counts, edges = np.zeros(0, dtype=int), np.zeros(0)
    mean = float(per_image.mean()) if len(per_image) else 0.0
    return {
        "images": len(image_ids),
        "instances": int(len(frame)),
        "mean_instances_per_image": mean,
        "median_instances_per_image": float(per_image.median()) if len(per_image) else 0.0,
        "reference_mean": reference_mean,
        "deviation_from_reference": mean - reference_mean if len(per_image) else 0.0,
        "area_histogram": {"counts": [int(c) for c in counts], "bin_edges": [float(e) for e in edges]},
    }


def instances_per_image(aset):
    """DataFrame of image file names and their instance counts."""
    counts = {img["id"]: 0 for img in aset.images}
    for ann in aset.annotations:
        counts[ann["image_id"]] = counts.get(ann["image_id"], 0) + 1
    names = {img["id"]: img["file_name"] for img in aset.images}
    return pd.DataFrame({"image": [names.get(i, str(i)) for i in counts], "instances": list(counts.values())})
