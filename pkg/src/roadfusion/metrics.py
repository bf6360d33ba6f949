"""Evaluation metrics and the evaluation driver.

Eight quantities per run: Precision, Recall, Macro-F1, mAP, IoU, AP,
I-AUROC and P-AUROC. Ranking metrics consume raw scores; thresholded
metrics min-max normalize per run and pick the F1-optimal threshold on
the validation split (falling back to 0.5 when none is available).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
import numpy as np
from scipy import stats

from .dataset import DatasetManifest, load_image_record

LOGGER = logging.getLogger(__name__)

TABLE_COLUMNS = ("P.", "R.", "M.-F1", "mAP", "IoU", "AP", "I-AUROC", "P-AUROC")


@dataclass
class MetricsReport:
    precision: float
    recall: float
    macro_f1: float
    map: float
    iou: float
    ap: float
    i_auroc: float
    p_auroc: float
    threshold_used: float
    n_images: int
    n_pixels_evaluated: int
    threshold_policy: str = "best_f1_on_val"
    config_digest: str = ""
    flags: tuple[str, ...] = ()

    def metric_values(self) -> tuple[float, ...]:
        return (
            self.precision,
            self.recall,
            self.macro_f1,
            self.map,
            self.iou,
            self.ap,
            self.i_auroc,
            self.p_auroc,
        )

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, float):
                lines.append(f"{key}={value:.6f}")
            elif isinstance(value, (list, tuple)):
                lines.append(f"{key}={','.join(map(str, value))}")
            else:
                lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        d = asdict(self)
        d["flags"] = list(self.flags)
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        d["flags"] = tuple(d.get("flags", ()))
        return cls(**d)


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if s.shape != y.shape:
        raise ValueError(f"scores/labels length mismatch: {s.shape} vs {y.shape}")
    return s, y


def auroc(scores, labels) -> float:
    """P(random positive outranks random negative); ties count 0.5."""
    s, y = _as_arrays(scores, labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC undefined: both classes must be present")
    ranks = stats.rankdata(s, method="average")
    pos_rank_sum = ranks[y == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pixel_auroc(maps, masks) -> float:
    """AUROC over the pooled pixel population of all images."""
    flat_scores, flat_labels = _pool_pixels(maps, masks)
    return auroc(flat_scores, flat_labels)


def _pool_pixels(maps, masks):
    scores, labels = [], []
    for amap, mask in zip(maps, masks):
        a = np.asarray(amap, dtype=np.float64)
        m = np.asarray(mask)
        if a.shape != m.shape:
            raise ValueError(f"map shape {a.shape} does not match mask {m.shape}")
        scores.append(a.reshape(-1))
        labels.append((m.reshape(-1) > 0).astype(np.int64))
    return np.concatenate(scores), np.concatenate(labels)


def average_precision(scores, labels) -> float:
    """Area under the PR curve via step-wise summation over descending
    thresholds (tied scores enter together)."""
    s, y = _as_arrays(scores, labels)
    n_pos = int((y == 1).sum())
    if n_pos == 0 or n_pos == len(y):
        raise ValueError("average precision undefined: both classes must be present")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    k = np.arange(1, len(y_sorted) + 1)
    # threshold boundaries: last index of each tied-score group
    boundary = np.ones(len(s_sorted), dtype=bool)
    boundary[:-1] = s_sorted[:-1] != s_sorted[1:]
    precision = tp[boundary] / k[boundary]
    recall = tp[boundary] / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def mean_average_precision(per_image) -> float:
    """Unweighted mean of per-image pixel AP; single-class images are
    skipped (and logged)."""
    values, skipped = [], 0
    for scores, labels in per_image:
        y = np.asarray(labels).reshape(-1)
        if (y > 0).all() or (y > 0).sum() == 0:
            skipped += 1
            continue
        values.append(average_precision(np.asarray(scores).reshape(-1), y > 0))
    if skipped:
        LOGGER.info("mAP: skipped %d single-class image(s)", skipped)
    if not values:
        raise ValueError("mAP undefined: every image was single-class")
    return float(np.mean(values))


def _minmax(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return (values - lo) / max(hi - lo, 1e-12)


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom > 0 else 0.0


def _binary_prf(pred: np.ndarray, truth: np.ndarray):
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = int(np.sum(~pred & ~truth))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    macro = 0.5 * (_f1(tp, fp, fn) + _f1(tn, fn, fp))
    return precision, recall, macro


def pixel_iou(pred, truth) -> float:
    """|pred AND truth| / |pred OR truth| over pooled binary pixels."""
    p = np.asarray(pred).reshape(-1).astype(bool)
    t = np.asarray(truth).reshape(-1).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    union = int(np.sum(p | t))
    return float(np.sum(p & t) / union) if union > 0 else 0.0


def best_f1_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    """Threshold (on already-normalized scores) maximizing positive-class F1."""
    truth = labels.astype(bool)
    best_t, best_f1 = 0.5, -1.0
    for t in np.unique(scores)[::-1]:
        pred = scores >= t
        tp = int(np.sum(pred & truth))
        fp = int(np.sum(pred & ~truth))
        fn = int(np.sum(~pred & truth))
        f1 = _f1(tp, fp, fn)
        if f1 > best_f1:
            best_f1, best_t = f1, float(t)
    return best_t


def thresholded_metrics(
    maps,
    masks,
    image_scores,
    image_labels,
    threshold_policy: str = "best_f1_on_val",
    val_scores=None,
    val_labels=None,
) -> tuple[float, float, float, float, float]:
    """Image-level precision/recall/macro-F1 plus pooled pixel IoU.

    Scores are min-max normalized per run; one scalar threshold (selected
    by F1 on the validation split, or fixed 0.5) applies to both the
    normalized image scores and the normalized pixel maps. Returns
    (precision, recall, macro_f1, iou, threshold).
    """
    image_scores = np.asarray(image_scores, dtype=np.float64)
    image_labels = np.asarray(image_labels).astype(bool)
    if val_scores is not None and len(val_scores) > 0:
        val_scores = np.asarray(val_scores, dtype=np.float64)
        all_image = np.concatenate([image_scores, val_scores])
    else:
        val_scores = None
        all_image = image_scores
    img_lo, img_hi = float(all_image.min()), float(all_image.max())
    norm_test = _minmax(image_scores, img_lo, img_hi)

    threshold = 0.5
    if threshold_policy == "best_f1_on_val":
        usable = (
            val_scores is not None
            and val_labels is not None
            and len(set(int(v) for v in val_labels)) == 2
        )
        if usable:
            threshold = best_f1_threshold(
                _minmax(val_scores, img_lo, img_hi), np.asarray(val_labels)
            )
        else:
            LOGGER.warning(
                "no usable validation split; falling back to fixed 0.5 threshold"
            )
    elif threshold_policy != "fixed":
        raise ValueError(f"unknown threshold policy {threshold_policy!r}")

    precision, recall, macro = _binary_prf(norm_test >= threshold, image_labels)

    flat_scores, flat_labels = _pool_pixels(maps, masks)
    px_lo, px_hi = float(flat_scores.min()), float(flat_scores.max())
    pred_px = _minmax(flat_scores, px_lo, px_hi) >= threshold
    iou = pixel_iou(pred_px, flat_labels)
    return precision, recall, macro, iou, threshold


def evaluate(
    scorer,
    manifest: DatasetManifest,
    threshold_policy: str = "best_f1_on_val",
    config_digest: str = "",
    flags: tuple[str, ...] = (),
) -> MetricsReport:
    """Run inference over the test split and assemble all eight metrics.

    Images without a ground-truth mask contribute all-negative pixels to
    the pooled metrics and are skipped by mAP.
    """
    test_entries = manifest.split("test")
    if not test_entries:
        raise ValueError("test split is empty")
    labels = [1 if e.label == "anomalous" else 0 for e in test_entries]
    if len(set(labels)) < 2:
        raise ValueError("test split must contain both image classes")

    maps, masks, image_scores = [], [], []
    for entry in test_entries:
        record = load_image_record(entry, manifest.root)
        amap = scorer.infer_record(record)
        mask = (
            record.mask
            if record.mask is not None
            else np.zeros(record.image.shape[:2], dtype=np.uint8)
        )
        maps.append(amap.scores)
        masks.append(mask)
        image_scores.append(amap.image_score)
    if not any(m.sum() >= 1 for m in masks):
        raise ValueError("test split needs at least one ground-truth mask")

    val_entries = manifest.split("val")
    val_scores, val_labels = [], []
    for entry in val_entries:
        record = load_image_record(entry, manifest.root)
        val_scores.append(scorer.infer_record(record).image_score)
        val_labels.append(1 if entry.label == "anomalous" else 0)

    i_auroc = auroc(image_scores, labels)
    p_auroc = pixel_auroc(maps, masks)
    ap = average_precision(*_pool_pixels(maps, masks))
    map_value = mean_average_precision(
        (m.reshape(-1), g.reshape(-1)) for m, g in zip(maps, masks)
    )
    precision, recall, macro_f1, iou, threshold = thresholded_metrics(
        maps,
        masks,
        image_scores,
        labels,
        threshold_policy=threshold_policy,
        val_scores=val_scores,
        val_labels=val_labels,
    )
    report = MetricsReport(
        precision=precision,
        recall=recall,
        macro_f1=macro_f1,
        map=map_value,
        iou=iou,
        ap=ap,
        i_auroc=i_auroc,
        p_auroc=p_auroc,
        threshold_used=threshold,
        n_images=len(test_entries),
        n_pixels_evaluated=int(sum(m.size for m in masks)),
        threshold_policy=threshold_policy,
        config_digest=config_digest,
        flags=flags,
    )
    bad = [v for v in report.metric_values() if not (0.0 <= v <= 1.0)]
    if bad:
        raise RuntimeError(f"metric values outside [0, 1]: {bad}")
    return report


def format_table(rows: list[tuple[str, MetricsReport]]) -> str:
    """Fixed-order comparison table over named runs."""
    name_width = max([len(name) for name, _ in rows] + [4])
    header = "Run".ljust(name_width) + "  " + "  ".join(
        c.rjust(7) for c in TABLE_COLUMNS
    )
    lines = [header, "-" * len(header)]
    for name, report in rows:
        cells = "  ".join(f"{v:7.4f}" for v in report.metric_values())
        lines.append(name.ljust(name_width) + "  " + cells)
    return "\n".join(lines)
