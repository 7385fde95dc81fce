"""IoU-family rewards/metrics and the weighted cross-entropy prediction loss.

Intersection counts (time, band) positions where predicted and true signals
coincide; union is the set union of predicted and true active positions.
Both-empty windows score 1.0: correctly reporting an empty spectrum is
information and must be rewarded.

All operations are pure and reentrant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .env import BandVector

PROB_EPS = 1e-7


@dataclass(frozen=True)
class IoUConfig:
    """block_n: pooling window length; prob_threshold: binarization cut."""

    block_n: int = 5
    prob_threshold: float = 0.5

    def __post_init__(self):
        if self.block_n < 1:
            raise ValueError(f"block_n must be >= 1, got {self.block_n}")
        if not 0.0 < self.prob_threshold < 1.0:
            raise ValueError(f"prob_threshold must be in (0, 1), got {self.prob_threshold}")


def as_mask(values, threshold: float = 0.5) -> np.ndarray:
    """Coerce a BandVector or array to a boolean activity mask.

    Float arrays are treated as probabilities and binarized at strict >
    threshold; integer/bool arrays as activity (nonzero = active).
    """
    if isinstance(values, BandVector):
        return values.active_mask(threshold)
    arr = np.asarray(values)
    if arr.dtype.kind == "f":
        return arr > threshold
    return arr > 0


def iou_instant(pred, truth, threshold: float = 0.5) -> float:
    """Single-step IoU over active bands; both-empty scores 1.0."""
    p = as_mask(pred, threshold)
    t = as_mask(truth, threshold)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: pred {p.shape} vs truth {t.shape}")
    union = int(np.count_nonzero(p | t))
    if union == 0:
        return 1.0
    inter = int(np.count_nonzero(p & t))
    return inter / union


def _pooled_counts(preds, truths, threshold: float):
    p = np.stack([as_mask(x, threshold) for x in preds])
    t = np.stack([as_mask(x, threshold) for x in truths])
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: preds {p.shape} vs truths {t.shape}")
    return int(np.count_nonzero(p & t)), int(np.count_nonzero(p | t))


def iou_block(preds: Sequence, truths: Sequence, n: int, threshold: float = 0.5) -> float:
    """Pooled IoU over the last min(n, len) steps of the window.

    Cumulative IoU at step t is iou_block with n = t + 1.
    """
    if len(preds) == 0:
        raise ValueError("empty window")
    if len(preds) != len(truths):
        raise ValueError(f"window mismatch: {len(preds)} preds vs {len(truths)} truths")
    if n < 1:
        raise ValueError(f"window length must be >= 1, got {n}")
    k = min(n, len(preds))
    inter, union = _pooled_counts(preds[-k:], truths[-k:], threshold)
    if union == 0:
        return 1.0
    return inter / union


def iou_cumulative(preds: Sequence, truths: Sequence, threshold: float = 0.5) -> float:
    """Pooled IoU over the whole history."""
    return iou_block(preds, truths, len(preds), threshold)


def cumulative_iou_curve(preds: Sequence, truths: Sequence,
                         threshold: float = 0.5) -> np.ndarray:
    """Running cumulative IoU after each step (vectorized prefix pooling)."""
    p = np.stack([as_mask(x, threshold) for x in preds])
    t = np.stack([as_mask(x, threshold) for x in truths])
    inter = np.cumsum((p & t).sum(axis=1))
    union = np.cumsum((p | t).sum(axis=1))
    out = np.ones(len(preds), dtype=np.float64)
    nz = union > 0
    out[nz] = inter[nz] / union[nz]
    return out


def block_iou_curve(preds: Sequence, truths: Sequence, n: int,
                    threshold: float = 0.5) -> np.ndarray:
    """Block IoU at every step (window min(n, t+1)), via prefix sums."""
    p = np.stack([as_mask(x, threshold) for x in preds])
    t = np.stack([as_mask(x, threshold) for x in truths])
    inter = np.concatenate([[0], np.cumsum((p & t).sum(axis=1))])
    union = np.concatenate([[0], np.cumsum((p | t).sum(axis=1))])
    steps = len(preds)
    out = np.ones(steps, dtype=np.float64)
    for i in range(steps):
        lo = max(i + 1 - n, 0)
        u = union[i + 1] - union[lo]
        if u > 0:
            out[i] = (inter[i + 1] - inter[lo]) / u
    return out


def iou_diff_block(preds: Sequence, truths: Sequence, t: int, n: int,
                   threshold: float = 0.5) -> float:
    """Block-IoU difference between windows n+1 and n ending at step t."""
    if t < n:
        raise ValueError(f"differential block IoU needs t >= n (t={t}, n={n})")
    if t >= len(preds):
        raise ValueError(f"step {t} beyond history of length {len(preds)}")
    upto_p, upto_t = preds[: t + 1], truths[: t + 1]
    return (iou_block(upto_p, upto_t, n + 1, threshold)
            - iou_block(upto_p, upto_t, n, threshold))


# ---------------------------------------------------------------------------
# Prediction loss
# ---------------------------------------------------------------------------

def wbce_loss(pred, truth, w_neg: float = 0.1) -> float:
    """Weighted binary cross-entropy, no-signal positions down-weighted by w_neg.

    Binary mode:  -mean_b[ y ln p + w_neg (1 - y) ln(1 - p) ].
    Multi-class (pred rows are per-band class distributions, truth integer
    labels): the positive term becomes the categorical cross-entropy of the
    true class; label-0 (none) positions take the w_neg weight.
    """
    p = pred.values if isinstance(pred, BandVector) else np.asarray(pred)
    y = truth.values if isinstance(truth, BandVector) else np.asarray(truth)
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 2:
        pc = np.clip(p, PROB_EPS, 1.0)
        labels = np.asarray(y, dtype=np.int64)
        picked = pc[np.arange(p.shape[0]), labels]
        weights = np.where(labels > 0, 1.0, w_neg)
        return float(-(weights * np.log(picked)).mean())
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    yb = (np.asarray(y) > 0).astype(np.float64)
    terms = yb * np.log(pc) + w_neg * (1.0 - yb) * np.log(1.0 - pc)
    return float(-terms.mean())
