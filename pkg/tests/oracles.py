"""Independent reference implementations used as test oracles.

Everything here is deliberately written the slow, obvious way (python loops,
64-bit math, direct formulas) and never calls into the code paths it checks.
"""

from __future__ import annotations

import math

import numpy as np


def fd_gradient(loss_fn, arr: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar ``loss_fn()`` w.r.t. ``arr`` in place."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn()
        flat[i] = orig - eps
        down = loss_fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def rel_err(analytic: np.ndarray, reference: np.ndarray) -> float:
    denom = max(float(np.max(np.abs(reference))), 1e-12)
    return float(np.max(np.abs(np.asarray(analytic, dtype=np.float64) - reference)) / denom)


def fd_jacobian(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Finite-difference Jacobian of vector-valued f at x (both flattened)."""
    x = x.astype(np.float64)
    n = x.size
    cols = []
    for j in range(n):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[j] += eps
        xm[j] -= eps
        fp = np.asarray(f(xp.reshape(x.shape)), dtype=np.float64).reshape(-1)
        fm = np.asarray(f(xm.reshape(x.shape)), dtype=np.float64).reshape(-1)
        cols.append((fp - fm) / (2 * eps))
    return np.stack(cols, axis=1)


def gaussian_log_prob(z: np.ndarray, mu: np.ndarray, var: np.ndarray) -> np.ndarray:
    """Direct per-pixel diagonal Gaussian log density; z is (B,C,H,W)."""
    z = z.astype(np.float64)
    mu = mu.reshape(1, -1, 1, 1).astype(np.float64)
    var = var.reshape(1, -1, 1, 1).astype(np.float64)
    terms = -0.5 * (math.log(2 * math.pi) + np.log(var) + (z - mu) ** 2 / var)
    return terms.sum(axis=1)


def loop_masked_mean(values: np.ndarray, mask: np.ndarray, select: int, sign: float) -> float:
    """Mean of sign*values over pixels where mask == select, by explicit loop."""
    total = 0.0
    count = 0
    v = values.reshape(-1)
    m = mask.reshape(-1)
    for i in range(v.size):
        if m[i] == select:
            total += sign * float(v[i])
            count += 1
    if count == 0:
        raise ZeroDivisionError("no selected pixels")
    return total / count


def direct_contrastive(anchors, a_labels, candidates, c_labels, tau, anchor_rows=None) -> float:
    """Literal anchor/positive/negative sum-of-logs evaluation in float64."""
    anchors = np.asarray(anchors, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64)
    total = 0.0
    pairs = 0
    for i in range(anchors.shape[0]):
        positives = []
        negatives = []
        for j in range(candidates.shape[0]):
            if anchor_rows is not None and anchor_rows[i] == j:
                continue
            if c_labels[j] == a_labels[i]:
                positives.append(j)
            else:
                negatives.append(j)
        if not positives or not negatives:
            continue
        neg_sum_terms = [math.exp(float(anchors[i] @ candidates[j]) / tau) for j in negatives]
        for j in positives:
            p = math.exp(float(anchors[i] @ candidates[j]) / tau)
            total += -math.log(p / (p + sum(neg_sum_terms)))
            pairs += 1
    if pairs == 0:
        raise ZeroDivisionError("no valid anchor-positive pairs")
    return total / pairs


def loop_composite(x_in: np.ndarray, x_obj: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-pixel `(1-y) * x_in + y * x_obj` on byte images, by explicit loop."""
    out = np.zeros_like(x_in)
    h, w = y.shape
    for i in range(h):
        for j in range(w):
            out[i, j] = x_obj[i, j] if y[i, j] else x_in[i, j]
    return out


def loop_block_max(mask: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Any-anomaly downsampling with rounded block boundaries, by loop."""
    h, w = mask.shape
    out = np.zeros((th, tw), dtype=np.uint8)
    for i in range(th):
        r0 = round(i * h / th)
        r1 = round((i + 1) * h / th)
        for j in range(tw):
            c0 = round(j * w / tw)
            c1 = round((j + 1) * w / tw)
            block = mask[r0:r1, c0:c1]
            out[i, j] = 1 if block.size and block.max() > 0 else 0
    return out


def exhaustive_pr_points(scores, labels):
    """(threshold, tp, fp) at every distinct score, descending, by loop."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    points = []
    for t in sorted(set(scores.tolist()), reverse=True):
        tp = fp = 0
        for s, y in zip(scores, labels):
            if s >= t:
                if y == 1:
                    tp += 1
                else:
                    fp += 1
        points.append((t, tp, fp))
    return points


def auprc_oracle(scores, labels) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    p = int(labels.sum())
    area = 0.0
    prev_recall = 0.0
    for _, tp, fp in exhaustive_pr_points(scores, labels):
        recall = tp / p
        precision = tp / (tp + fp) if (tp + fp) else 1.0
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def fpr_at_tpr_oracle(scores, labels, target: float = 0.95) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    p = int(labels.sum())
    n = int(labels.size - p)
    pts = exhaustive_pr_points(scores, labels)
    tprs = [tp / p for _, tp, _ in pts]
    fprs = [fp / n for _, _, fp in pts]
    for k, tpr in enumerate(tprs):
        if tpr >= target:
            if k == 0:
                return fprs[0]
            t0, t1 = tprs[k - 1], tprs[k]
            f0, f1 = fprs[k - 1], fprs[k]
            return f0 + (target - t0) / (t1 - t0) * (f1 - f0)
    return 1.0


def bilinear_reference(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation, scalar loops."""
    h, w = src.shape
    out = np.zeros((out_h, out_w), dtype=np.float64)
    for i in range(out_h):
        y = i * (h - 1) / (out_h - 1) if out_h > 1 else 0.0
        y0 = int(math.floor(y))
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        for j in range(out_w):
            x = j * (w - 1) / (out_w - 1) if out_w > 1 else 0.0
            x0 = int(math.floor(x))
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
            bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out
