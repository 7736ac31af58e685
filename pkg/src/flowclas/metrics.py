"""Pixel-level evaluation: precision-recall area, FPR at a TPR target, and
class-conditional score histograms.

Thresholding uses equally spaced bins over the observed score range
(anomalies are high scores, prediction rule is score >= threshold); pass
``bins=None`` for the exhaustive mode that thresholds at every distinct
score. All counting and integration is done in 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["EvalResult", "auprc", "fpr_at_tpr", "score_histograms", "evaluate_scores", "DEFAULT_BINS"]

DEFAULT_BINS = 5000


@dataclass
class EvalResult:
    auprc: float
    fpr95: float
    bins: int
    positives: int
    negatives: int
    fpr_interpolation: str = "linear"
    histogram: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "auprc": self.auprc,
            "fpr95": self.fpr95,
            "bins": self.bins,
            "positives": self.positives,
            "negatives": self.negatives,
            "fpr_interpolation": self.fpr_interpolation,
            "histogram": self.histogram,
        }


def _validate(scores, labels, bins):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.shape}) and labels ({y.shape}) differ in length")
    if not np.all(np.isin(np.unique(y), (0, 1))):
        raise ValueError("labels must be binary")
    y = y.astype(np.int64)
    p = int(y.sum())
    n = int(y.size - p)
    if p == 0 or n == 0:
        raise ValueError(f"need at least one positive and one negative, got {p} positives / {n} negatives")
    if bins is not None and bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s, y, p, n


def _counts_at_thresholds(s: np.ndarray, y: np.ndarray, bins: int | None):
    """TP and FP at descending thresholds (prediction: score >= threshold)."""
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    cum_pos = np.concatenate([[0], np.cumsum(y_sorted, dtype=np.int64)])
    total_pos = cum_pos[-1]
    if bins is None:
        thresholds = np.unique(s_sorted)[::-1]
    else:
        thresholds = np.linspace(s_sorted[0], s_sorted[-1], bins)[::-1]
    below = np.searchsorted(s_sorted, thresholds, side="left")
    tp = total_pos - cum_pos[below]
    predicted = s.size - below
    fp = predicted - tp
    return thresholds, tp.astype(np.float64), fp.astype(np.float64)


def auprc(scores, labels, bins: int | None = DEFAULT_BINS) -> float:
    """Area under the precision-recall curve by step integration over recall.

    The curve is anchored at (recall 0, precision 1) on the high-threshold
    end; each recall increment contributes its precision.
    """
    s, y, p, _ = _validate(scores, labels, bins)
    _, tp, fp = _counts_at_thresholds(s, y, bins)
    recall = tp / p
    precision = tp / np.maximum(tp + fp, 1.0)
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def fpr_at_tpr(scores, labels, tpr_target: float = 0.95, bins: int | None = DEFAULT_BINS) -> float:
    """Smallest false-positive rate at which TPR reaches the target.

    Linear interpolation between the two thresholds straddling the target;
    if the strictest threshold already meets it, its FPR is returned.
    """
    if not 0.0 < tpr_target <= 1.0:
        raise ValueError(f"tpr_target must be in (0, 1], got {tpr_target}")
    s, y, p, n = _validate(scores, labels, bins)
    _, tp, fp = _counts_at_thresholds(s, y, bins)
    tpr = tp / p
    fpr = fp / n
    idx = int(np.argmax(tpr >= tpr_target))
    if tpr[idx] < tpr_target:
        # lowest threshold predicts everything positive, so this cannot happen
        return 1.0
    if idx == 0:
        return float(fpr[0])
    t0, t1 = tpr[idx - 1], tpr[idx]
    f0, f1 = fpr[idx - 1], fpr[idx]
    frac = (tpr_target - t0) / (t1 - t0)
    return float(f0 + frac * (f1 - f0))


def score_histograms(scores, labels, n_buckets: int = 100):
    """Per-class score histograms on shared edges, plus their overlap.

    Each histogram is normalized to sum 1; the overlap is the summed
    bucket-wise minimum of the two, in [0, 1].
    """
    if n_buckets < 1:
        raise ValueError(f"n_buckets must be >= 1, got {n_buckets}")
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    s_in = s[y == 0]
    s_out = s[y == 1]
    if s_in.size == 0 or s_out.size == 0:
        raise ValueError("both classes must be non-empty for histograms")
    lo, hi = float(s.min()), float(s.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, n_buckets + 1)
    h_in, _ = np.histogram(s_in, bins=edges)
    h_out, _ = np.histogram(s_out, bins=edges)
    p_in = h_in / h_in.sum()
    p_out = h_out / h_out.sum()
    overlap = float(np.sum(np.minimum(p_in, p_out)))
    return {
        "edges": edges.tolist(),
        "inlier": p_in.tolist(),
        "outlier": p_out.tolist(),
        "overlap": overlap,
    }


def evaluate_scores(scores, labels, bins: int = DEFAULT_BINS, n_buckets: int = 100) -> EvalResult:
    """Full evaluation bundle used by the eval command."""
    s, y, p, n = _validate(scores, labels, bins)
    return EvalResult(
        auprc=auprc(s, y, bins),
        fpr95=fpr_at_tpr(s, y, 0.95, bins),
        bins=int(bins),
        positives=p,
        negatives=n,
        histogram=score_histograms(s, y, n_buckets),
    )


def evaluate_run(scores_dir, masks_manifest, bins: int = DEFAULT_BINS, out_json=None, n_buckets: int = 100) -> EvalResult:
    """Pool per-image score tensors against mask PNGs and evaluate.

    Score files are looked up as `<id>.score.ft` in ``scores_dir`` for every
    manifest record. Writes ``eval.json`` plus a ``hist.csv`` next to it when
    an output path is given.
    """
    import csv
    import json
    from pathlib import Path

    from .data_io import load_manifest, load_mask, read_tensor

    scores_dir = Path(scores_dir)
    records = load_manifest(masks_manifest, require_mask=True)
    if not records:
        raise ValueError(f"manifest {masks_manifest} has no records")
    all_scores = []
    all_labels = []
    for rec in records:
        ft = scores_dir / f"{rec.id}.score.ft"
        if not ft.exists():
            raise FileNotFoundError(f"missing score file {ft} for manifest id {rec.id}")
        s = read_tensor(ft)
        m = load_mask(rec.mask)
        if s.shape != m.shape:
            raise ValueError(f"{ft}: score shape {s.shape} does not match mask {m.shape}")
        all_scores.append(s.reshape(-1))
        all_labels.append(m.reshape(-1))
    result = evaluate_scores(np.concatenate(all_scores), np.concatenate(all_labels), bins, n_buckets)
    if out_json is not None:
        out_json = Path(out_json)
        out_json.parent.mkdir(parents=True, exist_ok=True)
        with open(out_json, "w") as f:
            json.dump(result.to_dict(), f, indent=2, sort_keys=True)
        hist = result.histogram
        with open(out_json.parent / "hist.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bucket_lo", "bucket_hi", "inlier", "outlier"])
            for i in range(len(hist["inlier"])):
                w.writerow([hist["edges"][i], hist["edges"][i + 1], hist["inlier"][i], hist["outlier"][i]])
    return result
