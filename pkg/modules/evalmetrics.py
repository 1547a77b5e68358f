# modules/evalmetrics.py
"""Instance-segmentation scores (AP, AR, F1, mIoU) and feature-set distances (FID, KID).

AP follows the COCO protocol: greedy score-ordered matching per image, a
precision envelope sampled at 101 recall points, averaged over IoU thresholds
0.50:0.05:0.95 with at most 100 detections per image.
"""
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import pycocotools.mask as mask_util
from scipy import linalg

from modules.annotate import coco_rle
from modules.errors import ConsistencyError, FeatureFormatError, NumericError, ShapeError, ValidationError
from modules.storage_utils import read_json, write_bytes
from utils import STREAM_KID, STREAM_SPLIT, SeedStream

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(np.arange(50, 100, 5) / 100.0)
RECALL_POINTS = np.arange(101) / 100.0
FEATURE_MAGIC = b"FEAT"
EIGEN_TOLERANCE = 1e-6


# Masks and matching --------------------------------------------------------

def as_rle(obj):
    """pycocotools RLE object of a binary mask or a COCO segmentation dict."""
    if isinstance(obj, dict):
        if isinstance(obj["counts"], bytes):
            return obj
        return coco_rle(obj["counts"], tuple(obj["size"]))
    mask = np.asarray(obj, dtype=bool)
    if mask.ndim != 2:
        raise ShapeError(f"masks must be 2-D, got shape {mask.shape}")
    return mask_util.encode(np.asfortranarray(mask.astype(np.uint8)))


def mask_iou(a, b):
    """|a & b| / |a | b|; two empty masks score 0."""
    return float(iou_matrix([a], [b])[0, 0])


def iou_matrix(preds, gts):
    """IoU of every (prediction, ground truth) pair; masks or RLE objects."""
    dt = [as_rle(m) for m in preds]
    gt = [as_rle(m) for m in gts]
    sizes = {tuple(r["size"]) for r in dt + gt}
    if len(sizes) > 1:
        raise ShapeError(f"mask shapes differ: {sorted(sizes)}")
    if not dt or not gt:
        return np.zeros((len(dt), len(gt)))
    ious = mask_util.iou(dt, gt, [0] * len(gt))
    return np.asarray(ious, dtype=np.float64).reshape(len(dt), len(gt))


@dataclass
class Matching:
    tp_pairs: list  # (pred index, gt index, iou)
    fp: list
    fn: list


def match_instances(preds, gts, iou_threshold, scores=None, ious=None):
    """Greedy one-to-one matching in descending score order.

    Each prediction takes the unmatched ground truth with the highest IoU at or
    above ``iou_threshold``; equal IoUs go to the lower ground-truth index.
    ``preds`` are masks; ``scores`` defaults to list order.
    """
    if ious is None:
        ious = iou_matrix(preds, gts)
    n_pred, n_gt = ious.shape
    scores = np.asarray(scores if scores is not None else -np.arange(n_pred), dtype=np.float64)
    order = np.argsort(-scores, kind="mergesort")
    matched = np.zeros(n_gt, dtype=bool)
    tp_pairs, fp = [], []
    for p in order:
        best, best_iou = -1, -math.inf
        for g in range(n_gt):
            if not matched[g] and ious[p, g] >= iou_threshold and ious[p, g] > best_iou:
                best, best_iou = g, ious[p, g]
        if best < 0:
            fp.append(int(p))
        else:
            matched[best] = True
            tp_pairs.append((int(p), best, float(best_iou)))
    return Matching(tp_pairs, fp, [g for g in range(n_gt) if not matched[g]])


# Evaluation ----------------------------------------------------------------

@dataclass
class Prediction:
    image_id: int
    score: float
    mask: object  # bool array, or a COCO segmentation dict {"size", "counts"}

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValidationError(f"prediction on image {self.image_id} has non-finite score")


@dataclass
class GroundTruth:
    image_id: int
    mask: object


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = IOU_THRESHOLDS
    max_detections: int = 100
    f1_iou: float = 0.5
    score_threshold: float = 0.5


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    ar: float
    f1: float
    precision: float
    recall: float
    miou: float
    miou_defined: bool
    miou_all_gt: float
    per_threshold: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)
    pr_curve: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "AP": self.ap, "AP50": self.ap50, "AP75": self.ap75, "AR": self.ar,
            "F1": self.f1, "precision": self.precision, "recall": self.recall,
            "mIoU": self.miou, "mIoU_defined": self.miou_defined, "mIoU_all_gt": self.miou_all_gt,
            "per_threshold": self.per_threshold, "counts": self.counts, "pr_curve": self.pr_curve,
        }

    def to_frame(self):
        return pd.DataFrame(self.per_threshold)

    def format_table(self):
        rows = [("AP@[.50:.95]", self.ap), ("AP50", self.ap50), ("AP75", self.ap75), ("AR@100", self.ar),
                ("F1", self.f1), ("precision", self.precision), ("recall", self.recall),
                ("mIoU", self.miou), ("mIoU (all GT)", self.miou_all_gt)]
        lines = [f"{name:<14} {value:.4f}" for name, value in rows]
        if not self.miou_defined:
            lines.append("mIoU undefined (no true positives), reported as 0")
        return "\n".join(lines)


def _ap_from_detections(scores, tps, n_gt):
    """101-point interpolated AP and final recall for one IoU threshold."""
    if n_gt == 0 or len(scores) == 0:
        return 0.0, 0.0, np.zeros(len(RECALL_POINTS))
    order = np.argsort(-np.asarray(scores), kind="mergesort")
    tp = np.asarray(tps, dtype=np.float64)[order]
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    for i in range(len(precision) - 1, 0, -1):
        if precision[i] > precision[i - 1]:
            precision[i - 1] = precision[i]
    sampled = np.zeros(len(RECALL_POINTS))
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    valid = idx < len(precision)
    sampled[valid] = precision[idx[valid]]
    return float(sampled.mean()), float(recall[-1]), sampled


def evaluate(preds, gts, config=EvalConfig(), image_ids=None):
    """Score predictions against ground truth; both are flat lists tagged by image_id.

    ``image_ids`` names images that exist but may hold no ground truth.
    """
    gt_by_image, pred_by_image = {}, {}
    for g in gts:
        gt_by_image.setdefault(g.image_id, []).append(g)
    for p in preds:
        pred_by_image.setdefault(p.image_id, []).append(p)
    known = set(gt_by_image) | set(image_ids or ())
    unknown = sorted(set(pred_by_image) - known)
    if unknown and known:
        raise ConsistencyError(f"predictions reference images without ground truth: {unknown[:10]}")

    thresholds = list(config.iou_thresholds)
    det_scores = {t: [] for t in thresholds}
    det_tps = {t: [] for t in thresholds}
    n_gt = 0
    f1_tp, f1_fp, f1_fn, tp_ious = 0, 0, 0, []

    for image_id in sorted(set(gt_by_image) | set(pred_by_image)):
        image_gts = [as_rle(g.mask) for g in gt_by_image.get(image_id, [])]
        image_preds = pred_by_image.get(image_id, [])
        image_preds = sorted(image_preds, key=lambda p: -p.score)[:config.max_detections]
        rles = [as_rle(p.mask) for p in image_preds]
        scores = [p.score for p in image_preds]
        n_gt += len(image_gts)
        ious = iou_matrix(rles, image_gts)

        for t in thresholds:
            m = match_instances(rles, image_gts, t, scores=scores, ious=ious)
            hit = np.zeros(len(rles), dtype=bool)
            hit[[p for p, _, _ in m.tp_pairs]] = True
            det_scores[t].extend(scores)
            det_tps[t].extend(hit.tolist())

        keep = [i for i, s in enumerate(scores) if s >= config.score_threshold]
        m = match_instances([rles[i] for i in keep], image_gts, config.f1_iou,
                            scores=[scores[i] for i in keep], ious=ious[keep] if keep else None)
        f1_tp += len(m.tp_pairs)
        f1_fp += len(m.fp)
        f1_fn += len(m.fn)
        tp_ious.extend(iou for _, _, iou in m.tp_pairs)

    per_threshold, aps, recalls, curve = [], [], [], None
    for t in thresholds:
        ap, rec, sampled = _ap_from_detections(det_scores[t], det_tps[t], n_gt)
        per_threshold.append({"iou": round(t, 2), "AP": ap, "recall": rec})
        aps.append(ap)
        recalls.append(rec)
        if curve is None or math.isclose(t, 0.5):
            curve = sampled

    precision = f1_tp / (f1_tp + f1_fp) if f1_tp + f1_fp else 0.0
    recall = f1_tp / (f1_tp + f1_fn) if f1_tp + f1_fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0

    def at(threshold):
        for row in per_threshold:
            if math.isclose(row["iou"], threshold):
                return row["AP"]
        return float("nan")

    report = EvalReport(
        ap=float(np.mean(aps)) if aps else 0.0,
        ap50=at(0.5),
        ap75=at(0.75),
        ar=float(np.mean(recalls)) if recalls else 0.0,
        f1=f1,
        precision=precision,
        recall=recall,
        miou=float(np.mean(tp_ious)) if tp_ious else 0.0,
        miou_defined=bool(tp_ious),
        miou_all_gt=float(np.sum(tp_ious) / n_gt) if n_gt else 0.0,
        per_threshold=per_threshold,
        counts={"images": len(set(gt_by_image) | set(pred_by_image)), "gt": n_gt,
                "predictions": len(preds), "tp": f1_tp, "fp": f1_fp, "fn": f1_fn},
        pr_curve={"recall": RECALL_POINTS.tolist(),
                  "precision": (curve if curve is not None else np.zeros(len(RECALL_POINTS))).tolist()},
    )
    logger.info("stage=eval images=%d gt=%d predictions=%d AP=%.4f AR=%.4f F1=%.4f",
                report.counts["images"], n_gt, len(preds), report.ap, report.ar, report.f1)
    return report


def load_ground_truth(aset):
    return [GroundTruth(a["image_id"], a["segmentation"]) for a in aset.annotations]


def load_predictions(source):
    """COCO results (a path or a list of {image_id, score, segmentation})."""
    records = read_json(source) if isinstance(source, str) else source
    return [Prediction(int(r["image_id"]), float(r["score"]), r["segmentation"]) for r in records]


# Feature-set distances -------------------------------------------------------

@dataclass
class FeatureSet:
    features: np.ndarray
    source: str = ""

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise FeatureFormatError(f"{self.source or 'features'}: expected an N x D matrix, got shape {features.shape}")
        if features.shape[0] < 2:
            raise FeatureFormatError(f"{self.source or 'features'}: need at least 2 rows, got {features.shape[0]}")
        bad = np.flatnonzero(~np.isfinite(features).all(axis=1))
        if len(bad):
            raise FeatureFormatError(f"{self.source or 'features'}: row {bad[0] + 1} has non-finite values")
        self.features = features

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


@dataclass
class KidResult:
    mean: float
    std: float
    subset_size: int
    n_subsets: int
    values: list = field(default_factory=list)


def _check_pair(a, b):
    if a.dim != b.dim:
        raise ShapeError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    if a.n < 2 or b.n < 2:
        raise NumericError("each feature set needs at least 2 rows")


def _psd_sqrt(mat):
    w, v = linalg.eigh(mat)
    if w.min() < -EIGEN_TOLERANCE:
        raise NumericError(f"covariance has eigenvalue {w.min():.3g} below -{EIGEN_TOLERANCE}")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(a, b):
    """Fréchet distance between Gaussian fits of two feature sets."""
    _check_pair(a, b)
    mu_a, mu_b = a.features.mean(axis=0), b.features.mean(axis=0)
    sigma_a = np.atleast_2d(np.cov(a.features, rowvar=False, ddof=1))
    sigma_b = np.atleast_2d(np.cov(b.features, rowvar=False, ddof=1))

    root_a = _psd_sqrt(sigma_a)
    inner = root_a @ sigma_b @ root_a
    inner = (inner + inner.T) / 2.0
    lam = linalg.eigvalsh(inner)
    if lam.min() < -EIGEN_TOLERANCE:
        raise NumericError(f"product covariance has eigenvalue {lam.min():.3g} below -{EIGEN_TOLERANCE}")
    trace_sqrt = np.sqrt(np.clip(lam, 0.0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * trace_sqrt)


def _polynomial_kernel(x, y):
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def mmd2_unbiased(x, y):
    m, n = len(x), len(y)
    kxx = _polynomial_kernel(x, x)
    kyy = _polynomial_kernel(y, y)
    kxy = _polynomial_kernel(x, y)
    return ((kxx.sum() - np.trace(kxx)) / (m * (m - 1))
            + (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
            - 2.0 * kxy.sum() / (m * n))


def kid(a, b, subset_size=None, n_subsets=100, seed=0):
    """Kernel distance: unbiased MMD^2 averaged over seeded subsets."""
    _check_pair(a, b)
    limit = min(a.n, b.n)
    subset_size = min(limit, 1000) if subset_size is None else int(subset_size)
    if subset_size > limit:
        raise ValidationError(f"subset_size {subset_size} exceeds the smaller set ({limit} rows)")
    if subset_size < 2:
        raise ValidationError("subset_size must be at least 2")
    values = []
    for s in range(n_subsets):
        rng = SeedStream(seed, STREAM_KID, s).rng
        x = a.features[rng.choice(a.n, subset_size, replace=False)]
        y = b.features[rng.choice(b.n, subset_size, replace=False)]
        values.append(float(mmd2_unbiased(x, y)))
    return KidResult(float(np.mean(values)), float(np.std(values)), subset_size, n_subsets, values)


def split_half(fs, seed=0):
    """Two disjoint random halves, for a same-domain baseline."""
    order = SeedStream(seed, STREAM_SPLIT).rng.permutation(fs.n)
    half = fs.n // 2
    return (FeatureSet(fs.features[order[:half]], f"{fs.source}[A]"),
            FeatureSet(fs.features[order[half:2 * half]], f"{fs.source}[B]"))


def distance_table(reference, candidates, subset_size=None, n_subsets=100, seed=0):
    """FID and KID mean/std of each named candidate set against ``reference``."""
    rows = []
    for name, fs in candidates.items():
        k = kid(reference, fs, subset_size, n_subsets, seed)
        rows.append({"dataset": name, "fid": fid(reference, fs), "kid_mean": k.mean, "kid_std": k.std})
    return pd.DataFrame(rows, columns=["dataset", "fid", "kid_mean", "kid_std"])


def save_features(path, features):
    """Binary ``FEAT`` + uint32 N, D + float32 rows (little-endian), or CSV for ``.csv`` paths."""
    features = np.asarray(features.features if isinstance(features, FeatureSet) else features)
    if path.lower().endswith(".csv"):
        payload = pd.DataFrame(features).to_csv(header=False, index=False)
        return write_bytes(path, payload.encode("utf-8"))
    n, d = features.shape
    header = FEATURE_MAGIC + np.array([n, d], dtype="<u4").tobytes()
    return write_bytes(path, header + features.astype("<f4").tobytes())


def load_features(path):
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise FeatureFormatError(f"cannot read feature file {path}: {e}") from e
    return parse_features(data, path)


def parse_features(data, path="<bytes>"):
    """Binary or CSV feature payload; ``path`` only labels errors."""
    if data[:4] == FEATURE_MAGIC:
        if len(data) < 12:
            raise FeatureFormatError(f"{path}: truncated header")
        n, d = (int(v) for v in np.frombuffer(data[4:12], dtype="<u4"))
        body = data[12:]
        if len(body) != 4 * n * d:
            raise FeatureFormatError(f"{path}: header says {n}x{d} floats but payload holds {len(body) // 4}")
        return FeatureSet(np.frombuffer(body, dtype="<f4").reshape(n, d).astype(np.float64), path)

    try:
        frame = pd.read_csv(io.BytesIO(data), header=None)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise FeatureFormatError(f"{path}: malformed CSV ({e})") from e
    values = frame.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(values).all(axis=1))
    if len(bad):
        raise FeatureFormatError(f"{path}: row {bad[0] + 1} is ragged or has non-finite values")
    return FeatureSet(values, path)
