"""Quantitative harnesses: negative perturbation and segmentation metrics.

Negative perturbation removes pixels from least to most relevant (replacing
them with the preprocessing mean, i.e. zero in normalized space) and tracks
classifier accuracy; a heatmap that ranks irrelevant pixels low keeps the
accuracy curve high and earns a larger area under it.
"""

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .core import check_finite
from .dataset import write_pgm
from .model import forward

DEFAULT_FRACTIONS = tuple(round(0.1 * k, 1) for k in range(1, 10))

HEATMAP_MAGIC = b"HMAP"


@dataclass
class PerturbationCurve:
    fractions: list
    accuracy: list
    auc: float


@dataclass
class SegReport:
    pixel_accuracy: float
    mean_average_precision: float
    per_image: list


def pixel_order_ascending(heatmap):
    """Flat pixel indices from least to most relevant, row-major on ties."""
    flat = np.asarray(heatmap, dtype=np.float64).ravel()
    return np.argsort(flat, kind="stable")


def mask_fraction(image, order, fraction, mean):
    """Replace the lowest-ranked ``fraction`` of pixels with the channel mean."""
    c, h, w = image.shape
    k = int(round(fraction * h * w))
    out = image.reshape(c, h * w).copy()
    sel = order[:k]
    out[:, sel] = np.asarray(mean, dtype=out.dtype).reshape(c, 1)
    return out.reshape(c, h, w)


def curve_auc(fractions, accuracy):
    """Trapezoidal area normalized by the fraction span."""
    fr = np.asarray(fractions, dtype=np.float64)
    acc = np.asarray(accuracy, dtype=np.float64)
    if fr.size == 1:
        return float(acc[0])
    span = float(fr[-1] - fr[0])
    return float(np.trapezoid(acc, fr) / span)


def negative_perturbation(model, samples, heatmap_fn, fractions=DEFAULT_FRACTIONS, mode="predicted"):
    """Accuracy-vs-masking curve over ``samples`` (pairs of image, label).

    ``mode`` picks the class the heatmap explains: the model's top-1
    prediction on the clean image, or the ground-truth label.
    """
    if mode not in ("predicted", "target"):
        raise ValueError(f"unknown mode {mode!r}")
    samples = list(samples)
    if not samples:
        raise ValueError("empty dataset")
    fractions = [float(f) for f in fractions]
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ValueError("fractions must be strictly increasing")

    hits = np.zeros(len(fractions), dtype=np.int64)
    for image, label in samples:
        image = np.asarray(image, dtype=np.float64)
        clean = forward(model, image)
        target = int(np.argmax(clean.logits)) if mode == "predicted" else int(label)
        order = pixel_order_ascending(heatmap_fn(image, target))
        for k, f in enumerate(fractions):
            masked = mask_fraction(image, order, f, model.mean)
            pred = int(np.argmax(forward(model, masked).logits))
            hits[k] += pred == int(label)
    accuracy = (hits / len(samples)).tolist()
    return PerturbationCurve(fractions=fractions, accuracy=accuracy, auc=curve_auc(fractions, accuracy))


def random_heatmap_fn(seed=0):
    """Baseline ranking: a per-image random permutation, seeded by content."""

    def fn(image, target):
        image = np.asarray(image)
        digest = zlib.crc32(np.ascontiguousarray(image, dtype=np.float32).tobytes())
        rng = np.random.default_rng((int(seed) << 32) ^ digest)
        h, w = image.shape[-2:]
        return rng.permutation(h * w).astype(np.float64).reshape(h, w)

    return fn


def average_precision(scores, positives):
    """Area under the precision-recall curve over all score thresholds.

    Ties share a threshold step. Monotone transforms of ``scores`` leave the
    result unchanged (rank-based).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    positives = np.asarray(positives, dtype=bool).ravel()
    if scores.size != positives.size:
        raise ValueError("scores and labels differ in length")
    total_pos = int(positives.sum())
    if total_pos == 0:
        raise ValueError("no positive pixels in ground truth")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    tp = np.cumsum(positives[order])
    ranks = np.arange(1, scores.size + 1)
    # keep only the last index of each tied score group
    boundary = np.append(sorted_scores[1:] != sorted_scores[:-1], True)
    tp_b = tp[boundary]
    rank_b = ranks[boundary]
    precision = tp_b / rank_b
    recall = tp_b / total_pos
    recall_prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - recall_prev) * precision))


def segmentation_eval(heatmaps, gt_masks, method_polarity="signed"):
    """Pixel accuracy and mean average precision against ground-truth masks.

    Signed methods keep positive pixels as the predicted segment;
    positive-only methods threshold at their own mean value.
    """
    if method_polarity not in ("signed", "positive_only"):
        raise ValueError(f"unknown polarity {method_polarity!r}")
    heatmaps = list(heatmaps)
    gt_masks = list(gt_masks)
    if len(heatmaps) != len(gt_masks):
        raise ValueError("heatmap/mask count mismatch")
    if not heatmaps:
        raise ValueError("empty evaluation set")
    correct = 0
    total = 0
    per_image = []
    for idx, (hm, mask) in enumerate(zip(heatmaps, gt_masks)):
        hm = np.asarray(hm, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if hm.shape != mask.shape:
            raise ValueError(f"image {idx}: heatmap {hm.shape} != mask {mask.shape}")
        if method_polarity == "signed":
            pred = hm > 0
        else:
            pred = hm > hm.mean()
        agree = int((pred == mask).sum())
        ap = average_precision(hm, mask)
        per_image.append({"index": idx, "accuracy": agree / mask.size, "ap": ap})
        correct += agree
        total += mask.size
    return SegReport(
        pixel_accuracy=correct / total,
        mean_average_precision=float(np.mean([r["ap"] for r in per_image])),
        per_image=per_image,
    )


# ---------------------------------------------------------------------------
# heatmap files


def render_heatmap(heatmap, pgm_path=None, raw_path=None):
    """Write a signed H×W map as 8-bit PGM and/or raw float32 ``HMAP`` file.

    The PGM maps zero to gray 128 and ±max|value| to 255/0.
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    if hm.ndim != 2:
        raise ValueError(f"heatmap must be H×W, got shape {hm.shape}")
    check_finite(hm, "heatmap")
    if raw_path is not None:
        h, w = hm.shape
        with open(raw_path, "wb") as fh:
            fh.write(HEATMAP_MAGIC)
            fh.write(struct.pack("<II", h, w))
            fh.write(hm.astype("<f4").tobytes())
    if pgm_path is not None:
        peak = float(np.max(np.abs(hm)))
        unit = hm / peak if peak > 0 else np.zeros_like(hm)
        write_pgm(pgm_path, np.round((unit + 1.0) * 127.5))


def read_heatmap_raw(path):
    """Read back a raw ``HMAP`` file as float32 H×W."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != HEATMAP_MAGIC:
            raise ValueError(f"{path}: bad heatmap magic {magic!r}")
        h, w = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(4 * h * w), dtype="<f4")
    if data.size != h * w:
        raise ValueError(f"{path}: truncated heatmap data")
    return data.reshape(h, w).copy()
