# modules/cli.py
"""Pipeline entry point.

    python cli.py gen-scenes --count 5 --seed 1
    python cli.py render --jobs 4
    python cli.py annotate
    python cli.py crop            # or: tile
    python cli.py jobs --ablation ALL
    python cli.py submit --endpoint http://127.0.0.1:8188 --annotations output/annotations/crops.json
    python cli.py eval --predictions preds.json
    python cli.py distance real.feat synthetic.feat --same
    python cli.py stats

Exit codes: 0 success, 1 invalid input or configuration, 2 file errors,
3 generation service failures.
"""
import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import pandas as pd
from tqdm import tqdm

from modules import annotate, evalmetrics, genclient, render, scene
from modules.errors import ConfigurationError, FactoryError, RemoteServiceError, StorageError
from modules.project_config import load_config
from modules.storage_utils import (fingerprint, read_json, read_png, sha256_file, stamp_is_current,
                                   write_json, write_stamp)

logger = logging.getLogger(__name__)


class Layout:
    """Where each stage reads and writes, below ``paths.root``."""

    def __init__(self, cfg):
        paths = cfg.paths
        self.root = paths.root
        self.scenes = paths.resolve("scenes")
        self.renders = paths.resolve("renders")
        self.annotations = paths.resolve("annotations")
        self.crops = paths.resolve("crops")
        self.tiles = paths.resolve("tiles")
        self.jobs = paths.resolve("jobs")
        self.artifacts = paths.resolve("artifacts")
        self.reports = paths.resolve("reports")

    @property
    def scene_index(self):
        return os.path.join(self.scenes, "index.json")

    @property
    def full_coco(self):
        return os.path.join(self.annotations, "full.json")

    @property
    def crops_coco(self):
        return os.path.join(self.annotations, "crops.json")

    @property
    def tiles_coco(self):
        return os.path.join(self.annotations, "tiles.json")

    @property
    def manifest(self):
        return os.path.join(self.jobs, "manifest.json")

    @property
    def pairing(self):
        return os.path.join(self.jobs, "pairing.json")

    def stamp(self, stage):
        return os.path.join(self.root, ".stamps", f"{stage}.json")

    def scene_path(self, seed):
        return os.path.join(self.scenes, scene.scene_filename(seed))

    def image_dir_for(self, annotations_path):
        """Directory holding the control images of an annotation file."""
        known = {self.full_coco: self.renders, self.crops_coco: self.crops, self.tiles_coco: self.tiles}
        target = os.path.abspath(annotations_path)
        for path, directory in known.items():
            if os.path.abspath(path) == target:
                return directory
        return os.path.dirname(target)


def configure_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, force=True,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _progress_disabled(quiet):
    return quiet or not sys.stderr.isatty()


def _progress(iterable, total, desc, quiet):
    return tqdm(iterable, total=total, desc=desc, file=sys.stderr, disable=_progress_disabled(quiet))


def _map(fn, tasks, jobs, desc, quiet):
    """Ordered map over ``tasks``, in worker processes when ``jobs`` > 1."""
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(_progress(pool.map(fn, tasks), len(tasks), desc, quiet))
    return [fn(task) for task in _progress(tasks, len(tasks), desc, quiet)]


def _scene_seeds(layout):
    if not os.path.exists(layout.scene_index):
        raise StorageError(f"no scene index at {layout.scene_index}; run gen-scenes first")
    seeds = read_json(layout.scene_index)["seeds"]
    if not seeds:
        raise StorageError(f"scene index {layout.scene_index} lists no scenes")
    return seeds


# gen-scenes -----------------------------------------------------------------

def _gen_scene_one(task):
    seed, scene_config, directory = task
    return scene.save_scene(scene.build_scene(seed, scene_config), directory)


def cmd_gen_scenes(cfg, args):
    layout = Layout(cfg)
    seeds = scene.scene_seeds(cfg.master_seed, cfg.scenes.count)
    settings = cfg.to_dict()
    fp = fingerprint("gen-scenes", seeds, settings["sampling"], settings["camera"], settings["bank"])
    stamp = layout.stamp("gen-scenes")
    if not args.force and stamp_is_current(stamp, fp):
        logger.info("stage=gen-scenes scenes=%d skipped=%d", len(seeds), len(seeds))
        return 0

    start = time.perf_counter()
    os.makedirs(layout.scenes, exist_ok=True)
    scene_config = cfg.scene_config()
    written = _map(_gen_scene_one, [(s, scene_config, layout.scenes) for s in seeds],
                   cfg.run.jobs, "scenes", args.quiet)
    write_json(layout.scene_index, {"master_seed": cfg.master_seed, "seeds": seeds})
    write_stamp(stamp, fp, written + [layout.scene_index])
    logger.info("stage=gen-scenes scenes=%d seconds=%.2f", len(seeds), time.perf_counter() - start)
    return 0


# render ---------------------------------------------------------------------

def _render_one(task):
    """Render one scene unless its stamp is current; returns True when rendered."""
    scene_path, directory, preview, force = task
    descriptor = scene.load_scene(scene_path)
    stem = f"scene_{descriptor.seed}"
    stamp = os.path.join(directory, ".stamps", f"{stem}.json")
    fp = fingerprint("render", sha256_file(scene_path), preview)
    if not force and stamp_is_current(stamp, fp):
        return False
    output = render.rasterize(descriptor, preview=preview)
    paths = output.save(directory, stem)
    write_stamp(stamp, fp, list(paths.values()))
    return True


def cmd_render(cfg, args):
    layout = Layout(cfg)
    seeds = _scene_seeds(layout)
    start = time.perf_counter()
    tasks = [(layout.scene_path(s), layout.renders, cfg.run.preview, args.force) for s in seeds]
    rendered = sum(_map(_render_one, tasks, cfg.run.jobs, "render", args.quiet))
    logger.info("stage=render scenes=%d rendered=%d skipped=%d seconds=%.2f",
                len(seeds), rendered, len(seeds) - rendered, time.perf_counter() - start)
    return 0


# annotate / crop / tile -----------------------------------------------------

def cmd_annotate(cfg, args):
    layout = Layout(cfg)
    seeds = _scene_seeds(layout)
    inputs = [(sha256_file(layout.scene_path(s)), sha256_file(os.path.join(layout.renders, f"scene_{s}_ids.png")))
              for s in seeds]
    fp = fingerprint("annotate", inputs)
    stamp = layout.stamp("annotate")
    if not args.force and stamp_is_current(stamp, fp):
        logger.info("stage=annotate images=%d skipped=%d", len(seeds), len(seeds))
        return 0

    descriptors = (scene.load_scene(layout.scene_path(s)) for s in seeds)
    renders = (render.load_render(layout.renders, f"scene_{s}") for s in seeds)
    annotate.export_coco(_progress(renders, len(seeds), "annotate", args.quiet), descriptors, layout.full_coco)
    write_stamp(stamp, fp, [layout.full_coco])
    return 0


def _window_one(task):
    kind, image, annotations, source_dir, out_dir, spec = task
    layers = {}
    for name in annotate.LAYERS:
        path = os.path.join(source_dir, f"{image['stem']}_{name}.png")
        if os.path.exists(path):
            layers[name] = read_png(path)
    source = annotate.SourceImage(image, annotations, layers)
    if kind == "crop":
        outputs = annotate.crop_fixed(source, spec, seed=image.get("scene_seed") or 0)
    else:
        outputs = annotate.tile_sahi(source, spec)
    written = annotate.write_window_layers(outputs, out_dir)
    for out in outputs:
        out.layers = {}
    return outputs, written


def _cmd_windows(cfg, args, kind):
    layout = Layout(cfg)
    source_path = args.annotations or layout.full_coco
    if kind == "crop":
        spec, out_dir, out_path = cfg.crop_spec(), layout.crops, layout.crops_coco
    else:
        spec, out_dir, out_path = cfg.tile_spec(), layout.tiles, layout.tiles_coco
    fp = fingerprint(kind, sha256_file(source_path), repr(spec))
    stamp = layout.stamp(kind)
    if not args.force and stamp_is_current(stamp, fp):
        logger.info("stage=%s skipped=all", kind)
        return 0

    start = time.perf_counter()
    aset = annotate.AnnotationSet.load(source_path)
    source_dir = layout.image_dir_for(source_path)
    by_image = aset.annotations_by_image()
    tasks = [(kind, img, by_image.get(img["id"], []), source_dir, out_dir, spec) for img in aset.images]
    results = _map(_window_one, tasks, cfg.run.jobs, kind, args.quiet)

    outputs = [out for batch, _ in results for out in batch]
    written = [path for _, paths in results for path in paths]
    windowed = annotate.tiles_to_coco(outputs, description=f"synthetic mushroom bed {kind}s")
    windowed.save(out_path)
    write_stamp(stamp, fp, written + [out_path])
    logger.info("stage=%s images=%d windows=%d annotations=%d seconds=%.2f", kind, len(aset.images),
                len(windowed.images), len(windowed.annotations), time.perf_counter() - start)
    return 0


def cmd_crop(cfg, args):
    return _cmd_windows(cfg, args, "crop")


def cmd_tile(cfg, args):
    return _cmd_windows(cfg, args, "tile")


# jobs / submit --------------------------------------------------------------

def cmd_jobs(cfg, args):
    layout = Layout(cfg)
    source_path = args.annotations or layout.crops_coco
    configs = cfg.ablation_configs()
    settings = cfg.generation_settings()
    per_depth = cfg.generation.seeds_per_depth
    fp = fingerprint("jobs", sha256_file(source_path), cfg.master_seed, [c.name for c in configs],
                     repr(settings), per_depth)
    stamp = layout.stamp("jobs")
    # the manifest changes during submission, so only its presence is checked
    if not args.force and os.path.exists(layout.manifest) and stamp_is_current(stamp, fp):
        logger.info("stage=jobs skipped=all manifest=%s", layout.manifest)
        return 0

    aset = annotate.AnnotationSet.load(source_path)
    refs = genclient.depth_refs_from_coco(aset, layout.image_dir_for(source_path))
    manifest = genclient.build_depth_batch(refs, cfg.master_seed, configs, settings, cfg.service.endpoint, per_depth)

    if any(c.ip_adapter for c in configs):
        for path in genclient.ensure_placeholder_references(settings.ip_references):
            logger.warning("style reference %s was missing; wrote a flat placeholder", path)
    manifest.save(layout.manifest)
    write_stamp(stamp, fp, [])
    logger.info("stage=jobs depths=%d configs=%d jobs=%d manifest=%s",
                len(refs), len(configs), len(manifest.jobs), layout.manifest)
    return 0


def cmd_submit(cfg, args):
    layout = Layout(cfg)
    manifest = genclient.JobManifest.load(layout.manifest)
    if args.dry_run:
        resumed = manifest.reset_for_resume()
        manifest.save(layout.manifest)
        counts = manifest.counts()
        logger.info("stage=submit dry_run=1 pending=%d done=%d resumed=%d",
                    counts[genclient.PENDING], counts[genclient.DONE], resumed)
        return 0

    total = len(manifest.jobs) - manifest.counts()[genclient.DONE]
    with tqdm(total=total, desc="submit", file=sys.stderr, disable=_progress_disabled(args.quiet)) as bar:
        genclient.submit(manifest, layout.artifacts, endpoint=cfg.service.endpoint,
                         concurrency=cfg.service.concurrency, manifest_path=layout.manifest,
                         attempts=cfg.service.attempts, backoff=cfg.service.backoff,
                         timeout=cfg.service.timeout, progress=bar)
    counts = manifest.counts()
    if counts[genclient.FAILED]:
        raise RemoteServiceError(f"{counts[genclient.FAILED]} of {len(manifest.jobs)} jobs failed; "
                                 f"run submit again to retry them")
    if args.annotations:
        aset = annotate.AnnotationSet.load(args.annotations)
        pairs = genclient.pair_outputs(layout.artifacts, aset, manifest)
        write_json(layout.pairing, {"manifest": layout.manifest, "annotations": args.annotations, "pairs": pairs})
        logger.info("stage=pair pairs=%d index=%s", len(pairs), layout.pairing)
    return 0


# eval / distance / stats ----------------------------------------------------

def cmd_eval(cfg, args):
    if not args.predictions:
        raise ConfigurationError("eval needs --predictions")
    layout = Layout(cfg)
    aset = annotate.AnnotationSet.load(args.annotations or layout.full_coco)
    report = evalmetrics.evaluate(evalmetrics.load_predictions(args.predictions),
                                  evalmetrics.load_ground_truth(aset), cfg.eval_config(),
                                  image_ids=[img["id"] for img in aset.images])
    write_json(os.path.join(layout.reports, "eval.json"), report.to_dict())
    print(report.format_table())
    return 0


def cmd_distance(cfg, args):
    layout = Layout(cfg)
    metrics = cfg.metrics
    reference = evalmetrics.load_features(args.reference)
    candidates = {os.path.basename(p): evalmetrics.load_features(p) for p in args.candidates}
    tables = []
    if args.same:
        first, second = evalmetrics.split_half(reference, metrics.kid_seed)
        tables.append(evalmetrics.distance_table(first, {"SAME": second}, metrics.kid_subset_size,
                                                 metrics.kid_subsets, metrics.kid_seed))
    if candidates:
        tables.append(evalmetrics.distance_table(reference, candidates, metrics.kid_subset_size,
                                                 metrics.kid_subsets, metrics.kid_seed))
    if not tables:
        raise ConfigurationError("distance needs at least one candidate feature file or --same")
    table = pd.concat(tables, ignore_index=True)
    path = os.path.join(layout.reports, "distance.csv")
    os.makedirs(layout.reports, exist_ok=True)
    table.to_csv(path, index=False)
    print(table.to_string(index=False))
    logger.info("stage=distance rows=%d report=%s", len(table), path)
    return 0


def cmd_stats(cfg, args):
    layout = Layout(cfg)
    aset = annotate.AnnotationSet.load(args.annotations or layout.full_coco)
    stats = annotate.dataset_stats(aset)
    write_json(os.path.join(layout.reports, "stats.json"), stats)
    for key in ("images", "instances", "mean_instances_per_image", "median_instances_per_image",
                "reference_mean", "deviation_from_reference"):
        print(f"{key:<28} {stats[key]}")
    return 0


COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "render": cmd_render,
    "annotate": cmd_annotate,
    "crop": cmd_crop,
    "tile": cmd_tile,
    "jobs": cmd_jobs,
    "submit": cmd_submit,
    "eval": cmd_eval,
    "distance": cmd_distance,
    "stats": cmd_stats,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="project config JSON")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--count", type=int, help="number of scenes")
    common.add_argument("-j", "--jobs", type=int, help="worker processes")
    common.add_argument("--force", action="store_true", help="redo work whose outputs are current")
    common.add_argument("--dry-run", action="store_true", help="submit: write the manifest only")
    common.add_argument("--endpoint", help=f"generation service URL (env ${genclient.ENDPOINT_ENV})")
    common.add_argument("--out", help="output root directory")
    common.add_argument("--annotations", help="COCO annotation file to read")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="cli.py", description="Synthetic mushroom bed dataset factory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-scenes", "render", "annotate", "crop", "tile", "submit", "stats"):
        sub.add_parser(name, parents=[common])
    jobs = sub.add_parser("jobs", parents=[common])
    jobs.add_argument("--ablation", nargs="+", help="ablation configs, or ALL for the full matrix")
    evaluate = sub.add_parser("eval", parents=[common])
    evaluate.add_argument("--predictions", help="COCO results JSON")
    distance = sub.add_parser("distance", parents=[common])
    distance.add_argument("reference", help="reference feature file")
    distance.add_argument("candidates", nargs="*", help="candidate feature files")
    distance.add_argument("--same", action="store_true", help="add a split-half baseline of the reference")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        cfg = load_config(args.config).with_overrides(
            seed=args.seed, count=args.count, endpoint=args.endpoint, out=args.out, jobs=args.jobs,
            ablation=getattr(args, "ablation", None))
        return COMMANDS[args.command](cfg, args) or 0
    except FactoryError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except OSError as e:
        logger.error("I/O error: %s", e)
        return 2
