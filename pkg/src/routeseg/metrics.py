"""Evaluation metrics on hard label maps.

Everything derives from per-class one-vs-rest confusion counts. A metric
whose denominator is zero is undefined: it is reported as None and
excluded from means rather than coerced to 0 or 1.

Hausdorff distance is the exact symmetric max-min over all mask pixels
(no surface extraction, no percentile). Classes present in exactly one
of the two masks contribute the maximal pixel distance (the image
diagonal); classes absent from both are skipped.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

METRIC_NAMES = ("dsc", "iou", "accuracy", "precision", "recall")


def confusion_counts(pred: np.ndarray, target: np.ndarray,
                     num_classes: int) -> np.ndarray:
    """Per-class [TP, FP, FN, TN] over all pixels, int64 [K, 4]."""
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} vs target {target.shape}")
    p = pred.reshape(-1)
    t = target.reshape(-1)
    if p.size and (min(p.min(), t.min()) < 0 or
                   max(p.max(), t.max()) >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    total = p.size
    out = np.zeros((num_classes, 4), dtype=np.int64)
    for k in range(num_classes):
        pk = p == k
        tk = t == k
        tp = int(np.count_nonzero(pk & tk))
        fp = int(np.count_nonzero(pk) - tp)
        fn = int(np.count_nonzero(tk) - tp)
        out[k] = (tp, fp, fn, total - tp - fp - fn)
    return out


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def pixel_metrics(counts: np.ndarray) -> List[Dict[str, Optional[float]]]:
    """Per-class dsc/iou/accuracy/precision/recall from [K, 4] counts."""
    rows = []
    for tp, fp, fn, tn in counts.astype(np.int64):
        tp, fp, fn, tn = int(tp), int(fp), int(fn), int(tn)
        rows.append({
            "dsc": _ratio(2 * tp, 2 * tp + fp + fn),
            "iou": _ratio(tp, tp + fp + fn),
            "accuracy": _ratio(tp + tn, tp + fp + fn + tn),
            "precision": _ratio(tp, tp + fp),
            "recall": _ratio(tp, tp + fn),
        })
    return rows


def mean_defined(values: List[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return sum(defined) / len(defined) if defined else None


def _directed_hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """max over a of min over b, exact, chunked to bound memory."""
    worst = 0.0
    for start in range(0, a.shape[0], 2048):
        chunk = a[start:start + 2048]
        d2 = ((chunk[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
        worst = max(worst, float(d2.min(axis=1).max()))
    return math.sqrt(worst)


def hausdorff_distance(mask_a: np.ndarray, mask_b: np.ndarray) -> Optional[float]:
    """Symmetric Hausdorff distance between two binary masks.

    None when both masks are empty; the image diagonal (largest possible
    pixel distance) when exactly one is empty.
    """
    if mask_a.shape != mask_b.shape:
        raise ValueError(f"mask shapes differ: {mask_a.shape} vs {mask_b.shape}")
    pts_a = np.argwhere(mask_a)
    pts_b = np.argwhere(mask_b)
    if not pts_a.size and not pts_b.size:
        return None
    if not pts_a.size or not pts_b.size:
        h, w = mask_a.shape
        return math.hypot(h - 1, w - 1)
    a = pts_a.astype(np.float64)
    b = pts_b.astype(np.float64)
    return max(_directed_hausdorff(a, b), _directed_hausdorff(b, a))


@dataclass
class MetricsReport:
    num_classes: int
    counts: np.ndarray
    per_class: List[Dict[str, Optional[float]]]
    means: Dict[str, Optional[float]]
    foreground_means: Dict[str, Optional[float]]
    hausdorff: List[Optional[float]] = field(default_factory=list)
    mean_hausdorff: Optional[float] = None
    num_images: int = 0

    def to_json(self) -> str:
        doc = {
            "num_classes": self.num_classes,
            "num_images": self.num_images,
            "counts": self.counts.tolist(),
            "per_class": self.per_class,
            "means": self.means,
            "foreground_means": self.foreground_means,
            "hausdorff": self.hausdorff,
            "mean_hausdorff": self.mean_hausdorff,
        }
        return json.dumps(doc, sort_keys=True)


def evaluate_predictions(preds: List[np.ndarray], targets: List[np.ndarray],
                         num_classes: int,
                         with_hausdorff: bool = False) -> MetricsReport:
    """Aggregate counts over images, then derive metrics.

    Hausdorff is averaged per class over images where it is defined, then
    over classes; it is optional because it is by far the slowest piece.
    """
    if len(preds) != len(targets):
        raise ValueError(f"{len(preds)} predictions vs {len(targets)} targets")
    if not preds:
        raise ValueError("no images to evaluate")
    counts = np.zeros((num_classes, 4), dtype=np.int64)
    for p, t in zip(preds, targets):
        counts += confusion_counts(p, t, num_classes)
    per_class = pixel_metrics(counts)
    means = {m: mean_defined([row[m] for row in per_class])
             for m in METRIC_NAMES}
    fg = {m: mean_defined([row[m] for row in per_class[1:]])
          for m in METRIC_NAMES}
    hd_per_class: List[Optional[float]] = []
    mean_hd = None
    if with_hausdorff:
        for k in range(num_classes):
            vals = []
            for p, t in zip(preds, targets):
                d = hausdorff_distance(p == k, t == k)
                if d is not None:
                    vals.append(d)
            hd_per_class.append(sum(vals) / len(vals) if vals else None)
        defined = [v for v in hd_per_class[1:] if v is not None]
        mean_hd = sum(defined) / len(defined) if defined else None
    return MetricsReport(num_classes=num_classes, counts=counts,
                         per_class=per_class, means=means,
                         foreground_means=fg, hausdorff=hd_per_class,
                         mean_hausdorff=mean_hd, num_images=len(preds))
