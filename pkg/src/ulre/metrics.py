"""Score-map post-processing, detection metrics (average precision and the
false positive rate at 95% true positive rate), and the binned
cosine-distance extrapolation analysis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import ClassMeans, DataError
from .numkernel import gaussian_blur, upsample_bilinear

__all__ = [
    "BinnedAnalysis",
    "postprocess_scores",
    "average_precision",
    "fpr_at_95_tpr",
    "cosine_distance",
    "extrapolation_analysis",
    "binned_csv",
]


def postprocess_scores(raw, out_h: int, out_w: int, sigma: float = 1.0) -> np.ndarray:
    """Full-resolution score map: bilinear upscale, then Gaussian blur.

    Both stages preserve constants and strict positivity.
    """
    scores = np.asarray(raw, dtype=np.float64)
    if scores.ndim != 2 or scores.size == 0:
        raise ValueError("postprocess_scores: expected a nonempty 2-D map")
    if not np.all(np.isfinite(scores)) or np.any(scores <= 0.0):
        raise ValueError("postprocess_scores: scores must be finite and positive")
    return gaussian_blur(upsample_bilinear(scores, out_h, out_w), sigma)


def _validate_scores_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels must have the same number of entries")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    y = y.astype(np.int64)
    n_pos = int(y.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative label")
    return s, y, n_pos, n_neg


def _threshold_counts(s: np.ndarray, y: np.ndarray):
    """Cumulative TP/FP at each distinct score threshold, descending.

    Classification rule is score >= threshold; tied scores move together.
    """
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    # last index of each tie group
    cut = np.nonzero(np.diff(s_sorted))[0]
    cut = np.concatenate([cut, [len(s_sorted) - 1]])
    tp = np.cumsum(y_sorted)[cut]
    fp = np.cumsum(1 - y_sorted)[cut]
    return s_sorted[cut], tp, fp


def average_precision(scores, labels) -> float:
    """Non-interpolated average precision over all score thresholds.

    AP = sum_n (R_n - R_{n-1}) * P_n with thresholds descending through the
    distinct score values (ties share a threshold).
    """
    s, y, n_pos, _ = _validate_scores_labels(scores, labels)
    _, tp, fp = _threshold_counts(s, y)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def fpr_at_95_tpr(scores, labels, tpr_target: float = 0.95) -> float:
    """Lowest false positive rate among thresholds reaching the TPR target.

    Thresholds are the distinct score values; equal scores are classified
    atomically. A threshold at the minimum score always reaches TPR = 1, so
    the operating set is never empty.
    """
    s, y, n_pos, n_neg = _validate_scores_labels(scores, labels)
    _, tp, fp = _threshold_counts(s, y)
    tpr = tp / n_pos
    fpr = fp / n_neg
    return float(fpr[tpr >= tpr_target].min())


def cosine_distance(x, mu) -> float:
    """1 - cos(angle): 0 parallel, 1 orthogonal, 2 antiparallel."""
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    nx = np.linalg.norm(x)
    nm = np.linalg.norm(mu)
    if nx == 0.0 or nm == 0.0:
        raise ValueError("cosine_distance: zero vector")
    return float(1.0 - np.dot(x, mu) / (nx * nm))


@dataclass(frozen=True)
class BinnedAnalysis:
    """Mean predicted probability binned by distance to the nearest class mean.

    Bins partition [0, n_bins * bin_width); counts sum to the number of rows.
    mean_prob is NaN for empty bins.
    """

    bin_edges: np.ndarray  # (n_bins + 1,)
    counts: np.ndarray  # (n_bins,)
    mean_prob: np.ndarray  # (n_bins,), NaN where count == 0


def extrapolation_analysis(
    features, means: ClassMeans, probs, bin_width: float = 0.05
) -> BinnedAnalysis:
    """Group rows by minimum cosine distance to the class means and average
    the predicted probabilities per bin.

    Each feature row is unit-normalized before the distance computation.
    """
    x = np.asarray(features, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64).ravel()
    if x.ndim != 2 or x.shape[0] != p.shape[0]:
        raise ValueError("extrapolation_analysis: need (N, D) features, N probs")
    if len(means.ids) == 0:
        raise ValueError("extrapolation_analysis: no class means")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("extrapolation_analysis: probs must lie in [0, 1]")
    if not bin_width > 0.0:
        raise ValueError("extrapolation_analysis: bin_width must be positive")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise DataError("extrapolation_analysis: zero feature vector")
    unit = x / norms[:, None]
    dist = 1.0 - (unit @ means.unit_means.T).max(axis=1)
    dist = np.clip(dist, 0.0, 2.0)
    n_bins = max(1, math.ceil(dist.max() / bin_width)) if dist.max() > 0 else 1
    idx = np.minimum((dist / bin_width).astype(np.intp), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=p, minlength=n_bins)
    with np.errstate(invalid="ignore"):
        mean_prob = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    edges = np.arange(n_bins + 1, dtype=np.float64) * bin_width
    return BinnedAnalysis(edges, counts, mean_prob)


def binned_csv(analysis: BinnedAnalysis) -> str:
    """CSV rendering: header bin_lo,bin_hi,count,mean_prob; NaN for empty bins."""
    lines = ["bin_lo,bin_hi,count,mean_prob"]
    for i, count in enumerate(analysis.counts):
        lo = analysis.bin_edges[i]
        hi = analysis.bin_edges[i + 1]
        lines.append(f"{lo:.6g},{hi:.6g},{int(count)},{analysis.mean_prob[i]:.10g}")
    return "\n".join(lines) + "\n"
