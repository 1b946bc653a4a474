"""Ranking, detection and grounding metrics plus score post-processing.

Segment protocols at desk scale:

* top-5 mAP: frames are grouped into fixed-length segments (5 frames = 5 s
  at 1 fps). For each annotator, segment ground truth is the mean annotator
  score; the top 15% of segments (ceil, ties to the earlier segment) are
  positive. Segments are ranked by mean predicted score, and AP is taken over
  the top-5 list, normalised by the positives that appear in that list
  (0 when none do). Scores are averaged over annotators.
* mAP@k: segments ranked by score, the list is cut where cumulative duration
  first reaches k% of the total, and AP on that list is normalised by all
  positives in the video.

Ranking ties are broken by segment index so every metric is a deterministic
function of score order.
"""
from __future__ import annotations

import csv
import math
import os
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

NAN = float("nan")


# ---------------------------------------------------------------------------
# rank correlation


def kendall_tau(pred: Sequence[float], gt: Sequence[float]) -> float:
    """Tie-corrected Kendall tau-b; NaN if either input is constant."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-D and equal length")
    if len(x) < 2:
        raise ValueError("need at least two items")
    sx = np.sign(x[:, None] - x[None, :])
    sy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(len(x), 1)
    sx, sy = sx[iu], sy[iu]
    n_x = np.count_nonzero(sx)
    n_y = np.count_nonzero(sy)
    if n_x == 0 or n_y == 0:
        return NAN
    return float(np.sum(sx * sy) / math.sqrt(n_x * n_y))


def spearman_rho(pred: Sequence[float], gt: Sequence[float]) -> float:
    """Pearson correlation of average ranks; NaN for zero-variance input."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-D and equal length")
    if len(x) < 2:
        raise ValueError("need at least two items")
    rx = rankdata(x) - (len(x) + 1) / 2
    ry = rankdata(y) - (len(y) + 1) / 2
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0.0:
        return NAN
    return float(rx @ ry) / den


def pooled_or_mean(fn, pairs: Iterable[tuple[np.ndarray, np.ndarray]], pooled: bool = False) -> float:
    """Per-video average of a correlation (NaNs skipped), or one pooled value."""
    pairs = list(pairs)
    if pooled:
        return fn(np.concatenate([p for p, _ in pairs]), np.concatenate([g for _, g in pairs]))
    vals = [fn(p, g) for p, g in pairs]
    vals = [v for v in vals if np.isfinite(v)]
    return float(np.mean(vals)) if vals else NAN


# ---------------------------------------------------------------------------
# average precision


def average_precision(ranked_relevance: Sequence[int], n_positives: int | None = None) -> float:
    """Mean of precision@k over relevant ranks k.

    ``n_positives`` overrides the normaliser (for truncated lists); NaN when
    it is zero.
    """
    rel = np.asarray(ranked_relevance, dtype=np.float64)
    total = int(rel.sum()) if n_positives is None else n_positives
    if total == 0:
        return NAN
    hits = np.cumsum(rel)
    prec = hits / np.arange(1, len(rel) + 1)
    return float(np.sum(prec * rel) / total)


def rank_order(scores: Sequence[float]) -> np.ndarray:
    """Indices by descending score, ties to the lower index."""
    s = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(s)), -s))


def segment_bounds(T: int, seg_len: int) -> list[tuple[int, int]]:
    if seg_len < 1:
        raise ValueError("segment length must be >= 1")
    return [(s, min(s + seg_len, T)) for s in range(0, T, seg_len)]


def segment_means(frame_scores: np.ndarray, bounds) -> np.ndarray:
    return np.array([float(np.mean(frame_scores[s:e])) for s, e in bounds])


def top_fraction_positive(values: np.ndarray, fraction: float = 0.15) -> np.ndarray:
    k = max(1, math.ceil(fraction * len(values)))
    pos = np.zeros(len(values), dtype=np.int64)
    pos[rank_order(values)[:k]] = 1
    return pos


def top5_map(frame_scores, annotator_gt, seg_len: int = 5, top: int = 5, fraction: float = 0.15) -> float:
    """Top-5 segment mAP averaged over annotators.

    ``annotator_gt`` is (annotators, T) or a single (T,) curve.
    """
    scores = np.asarray(frame_scores, dtype=np.float64)
    gt = np.atleast_2d(np.asarray(annotator_gt, dtype=np.float64))
    if gt.shape[1] != len(scores):
        raise ValueError("ground truth and scores differ in length")
    bounds = segment_bounds(len(scores), seg_len)
    if len(bounds) < top:
        raise ValueError(f"need at least {top} segments, got {len(bounds)}")
    pred_seg = segment_means(scores, bounds)
    order = rank_order(pred_seg)[:top]
    aps = []
    for row in gt:
        labels = top_fraction_positive(segment_means(row, bounds), fraction)
        ranked = labels[order]
        ap = average_precision(ranked)
        aps.append(0.0 if math.isnan(ap) else ap)
    return float(np.mean(aps))


def map_at_k(segment_scores, binary_gt, k: float, durations=None) -> float:
    """AP over the ranked list truncated at k% of total duration."""
    s = np.asarray(segment_scores, dtype=np.float64)
    y = np.asarray(binary_gt, dtype=np.int64)
    d = np.ones(len(s)) if durations is None else np.asarray(durations, dtype=np.float64)
    total_pos = int(y.sum())
    if total_pos == 0:
        raise ValueError("no positive segments")
    order = rank_order(s)
    budget = k / 100.0 * d.sum()
    cum = np.cumsum(d[order])
    cut = int(np.searchsorted(cum, budget - 1e-12 * d.sum(), side="left")) + 1
    cut = min(cut, len(order))
    return average_precision(y[order[:cut]], n_positives=total_pos)


# ---------------------------------------------------------------------------
# temporal grounding


def temporal_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    for s, e in (a, b):
        if not e > s:
            raise ValueError(f"degenerate span ({s}, {e})")
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0]) - max(0.0, max(a[0], b[0]) - min(a[1], b[1]))
    return inter / union


def moving_average(scores, w: int) -> np.ndarray:
    """Centred box filter; near the edges it averages over the available frames."""
    x = np.asarray(scores, dtype=np.float64)
    if w <= 1:
        return x.copy()
    left, right = (w - 1) // 2, w // 2
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(len(x))
    lo = np.maximum(idx - left, 0)
    hi = np.minimum(idx + right + 1, len(x))
    return (c[hi] - c[lo]) / (hi - lo)


def span_from_scores(scores, w: int = 8, threshold: float | None = None) -> tuple[int, int]:
    """Best contiguous span of a smoothed score curve.

    Frames above ``threshold`` (default: midpoint of the smoothed min and max)
    form runs; the run with the largest summed score wins. Returns [start, end).
    """
    sm = moving_average(scores, w)
    if len(sm) == 0:
        raise ValueError("empty score sequence")
    thr = 0.5 * (sm.max() + sm.min()) if threshold is None else threshold
    above = sm >= thr
    best, best_sum, t = (0, 1), -np.inf, 0
    while t < len(sm):
        if above[t]:
            s = t
            while t < len(sm) and above[t]:
                t += 1
            total = float(sm[s:t].sum())
            if total > best_sum:
                best, best_sum = (s, t), total
        else:
            t += 1
    return best


def recall_at_iou(pred_span, gt_span, thresholds=(0.5, 0.7)) -> dict[float, bool]:
    iou = temporal_iou(pred_span, gt_span)
    return {th: iou >= th for th in thresholds}


# ---------------------------------------------------------------------------
# smoothing and peaks


def savgol_coeffs(window: int, order: int) -> np.ndarray:
    """Smoothing taps of a least-squares polynomial fit evaluated at the centre."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    if not 0 <= order < window:
        raise ValueError("order must satisfy 0 <= order < window")
    half = window // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    A = np.vander(x, order + 1, increasing=True)
    return np.linalg.pinv(A)[0]


def savgol_smooth(scores, window: int = 9, order: int = 2, mode: str = "mirror") -> np.ndarray:
    """Savitzky-Golay smoothing.

    ``mirror`` pads by reflection without repeating the edge sample. ``interp``
    instead evaluates the polynomial fitted to the first/last full window at
    the edge positions, so polynomials up to ``order`` pass through unchanged.
    """
    c = savgol_coeffs(window, order)
    x = np.asarray(scores, dtype=np.float64)
    if len(x) == 0:
        return x.copy()
    half = window // 2
    if mode == "mirror":
        if len(x) <= half:
            raise ValueError("signal shorter than half the window")
        pad = np.pad(x, half, mode="reflect")
        return np.correlate(pad, c, mode="valid")
    if mode == "interp":
        if len(x) < window:
            raise ValueError("interp mode needs at least one full window")
        out = np.correlate(x, c, mode="same")
        t = np.arange(window, dtype=np.float64)
        A = np.vander(t, order + 1, increasing=True)
        head = np.linalg.lstsq(A, x[:window], rcond=None)[0]
        tail = np.linalg.lstsq(A, x[-window:], rcond=None)[0]
        out[:half] = A[:half] @ head
        out[-half:] = A[-half:] @ tail
        return out
    raise ValueError(f"unknown edge mode {mode!r}")


def detect_peaks(scores, min_distance: int = 1, height: float = -np.inf) -> list[int]:
    """Strict local maxima at or above ``height``, thinned greedily by height."""
    x = np.asarray(scores, dtype=np.float64)
    if len(x) < 3:
        return []
    cand = np.flatnonzero((x[1:-1] > x[:-2]) & (x[1:-1] > x[2:])) + 1
    cand = cand[x[cand] >= height]
    kept: list[int] = []
    for i in sorted(cand, key=lambda j: (-x[j], j)):
        if all(abs(i - j) >= min_distance for j in kept):
            kept.append(int(i))
    return sorted(kept)


# ---------------------------------------------------------------------------
# report


def write_report(path: str | os.PathLike, rows: Sequence[tuple[str, str, float]]):
    """CSV with one (video, metric, value) row each plus per-metric ``__mean__`` rows."""
    by_metric: dict[str, list[float]] = {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video", "metric", "value"])
        for vid, metric, value in rows:
            w.writerow([vid, metric, repr(float(value))])
            if np.isfinite(value):
                by_metric.setdefault(metric, []).append(float(value))
        for metric, vals in by_metric.items():
            w.writerow(["__mean__", metric, repr(float(np.mean(vals)))])
