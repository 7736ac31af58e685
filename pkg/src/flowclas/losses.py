"""Training objectives: masked inlier NLL, supervised contrastive loss,
optional outlier likelihood minimization, and their weighted combination.

Sums from the definitions are normalized to means (over unmasked pixels and
over anchor-positive pairs) so the loss weights do not depend on batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, gather_mask, matmul, mul, sub, exp, log

__all__ = [
    "DegenerateBatchError",
    "LossBreakdown",
    "masked_nll",
    "outlier_likelihood_min",
    "contrastive_pairs_loss",
    "supervised_contrastive",
    "total_loss",
    "VARIANTS",
]

VARIANTS = ("contrastive", "min", "ml_only")


class DegenerateBatchError(RuntimeError):
    """Batch cannot contribute to a loss term and should be skipped."""


@dataclass
class LossBreakdown:
    l_ml: float
    l_con: float
    l_min: float
    total: float
    inlier_pixels: int
    outlier_pixels: int
    anchors: int


def _binary_mask(mask, shape) -> np.ndarray:
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if m.shape != shape:
        raise ValueError(f"mask shape {m.shape} does not match map shape {shape}")
    vals = np.unique(m)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError(f"mask must be binary, found values {vals[:8]}")
    return m.astype(bool)


def masked_nll(log_prob: Tensor, logdet: Tensor, mask_down) -> Tensor:
    """Mean negative log-likelihood over pixels the mask marks as inlier (0)."""
    m = _binary_mask(mask_down, log_prob.shape)
    if logdet.shape != log_prob.shape:
        raise ValueError(f"logdet shape {logdet.shape} does not match log_prob {log_prob.shape}")
    inlier = ~m
    if not inlier.any():
        raise DegenerateBatchError("masked_nll: batch has no inlier pixels")
    ll = add(log_prob, logdet)
    picked = gather_mask(ll, inlier)
    return mul(picked.mean(), Tensor(np.asarray(-1.0, ll.dtype.type)))


def outlier_likelihood_min(log_prob: Tensor, logdet: Tensor, mask_down) -> Tensor:
    """Mean log-likelihood over outlier pixels (to be minimized).

    Returns a constant zero when the batch has no outlier pixels.
    """
    m = _binary_mask(mask_down, log_prob.shape)
    if logdet.shape != log_prob.shape:
        raise ValueError(f"logdet shape {logdet.shape} does not match log_prob {log_prob.shape}")
    if not m.any():
        return Tensor(np.asarray(0.0, log_prob.dtype.type))
    ll = add(log_prob, logdet)
    return gather_mask(ll, m).mean()


def _check_unit_rows(name: str, t: Tensor, tol: float = 1e-3):
    norms = np.sqrt(np.sum(t.data.astype(np.float64) ** 2, axis=1))
    if norms.size and np.max(np.abs(norms - 1.0)) > tol:
        raise ValueError(f"{name} must be L2-normalized rows, worst norm {norms[np.argmax(np.abs(norms-1))]:.6f}")


def contrastive_pairs_loss(
    anchors: Tensor,
    anchor_labels,
    candidates: Tensor,
    candidate_labels,
    tau: float,
    anchor_rows=None,
) -> Tensor:
    """Temperature-scaled contrastive loss over anchor/candidate dot products.

    For each anchor and each same-class candidate (the anchor's own row in
    the pool, given by ``anchor_rows``, is excluded) the log-ratio of the
    positive similarity against that positive plus all other-class
    similarities is accumulated; the result is the mean over anchor-positive
    pairs. Anchors lacking a positive or a negative are skipped; if every
    anchor is skipped the batch is degenerate.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if anchors.ndim != 2 or candidates.ndim != 2 or anchors.shape[1] != candidates.shape[1]:
        raise ValueError(f"anchors {anchors.shape} and candidates {candidates.shape} must be (N,D)/(M,D)")
    a_lab = np.asarray(anchor_labels).reshape(-1)
    c_lab = np.asarray(candidate_labels).reshape(-1)
    n, m = anchors.shape[0], candidates.shape[0]
    if a_lab.shape != (n,) or c_lab.shape != (m,):
        raise ValueError("label lengths do not match anchors/candidates")
    _check_unit_rows("anchors", anchors)
    _check_unit_rows("candidates", candidates)

    pos = a_lab[:, None] == c_lab[None, :]
    if anchor_rows is not None:
        rows = np.asarray(anchor_rows).reshape(-1)
        pos[np.arange(n), rows] = False
    neg = a_lab[:, None] != c_lab[None, :]
    valid = pos.any(axis=1) & neg.any(axis=1)
    if not valid.any():
        raise DegenerateBatchError("contrastive loss: every anchor lacks a positive or a negative")
    pos &= valid[:, None]
    neg &= valid[:, None]
    n_pairs = int(pos.sum())

    dtype = anchors.dtype.type
    sims = mul(matmul(anchors, candidates, transpose_b=True), Tensor(np.asarray(1.0 / tau, dtype)))
    # detached per-row max keeps exp well-scaled; the softmax gradient is
    # unchanged by a constant shift
    allowed = pos | neg
    shift = np.where(
        valid[:, None],
        np.max(np.where(allowed, sims.data, -np.inf), axis=1, keepdims=True, initial=-np.inf),
        0.0,
    ).astype(anchors.dtype)
    shifted = sub(sims, Tensor(shift))
    e = exp(shifted)
    neg_sum = mul(e, Tensor(neg.astype(anchors.dtype))).sum(axis=1, keepdims=True)
    per_pair = sub(log(add(e, neg_sum)), shifted)
    total = mul(per_pair, Tensor(pos.astype(anchors.dtype))).sum()
    return mul(total, Tensor(np.asarray(1.0 / n_pairs, dtype)))


def supervised_contrastive(sets, tau: float) -> Tensor:
    """Contrastive loss over anchor sets as used in training.

    Anchors are the inlier and outlier sets drawn from mixed images; the
    candidate pool adds the outlier (and, in natural-image mode, inlier)
    sets drawn from outlier images. Anchors exclude themselves from their
    own positive sets.
    """
    blocks = [(sets.a_in, 0), (sets.a_ood, 1), (sets.b_ood, 1)]
    if sets.b_in is not None:
        blocks.append((sets.b_in, 0))
    pool = _vstack([t for t, _ in blocks])
    labels = np.concatenate([np.full(t.shape[0], lab) for t, lab in blocks])
    n_anchor = sets.a_in.shape[0] + sets.a_ood.shape[0]
    anchors = _vstack([sets.a_in, sets.a_ood])
    return contrastive_pairs_loss(
        anchors,
        labels[:n_anchor],
        pool,
        labels,
        tau,
        anchor_rows=np.arange(n_anchor),
    )


def _vstack(tensors: list[Tensor]) -> Tensor:
    """Row-concatenate (n_i, D) tensors with constant placement matmuls."""
    if len(tensors) == 1:
        return tensors[0]
    total = sum(t.shape[0] for t in tensors)
    out = None
    offset = 0
    for t in tensors:
        place = np.zeros((total, t.shape[0]), dtype=t.dtype)
        place[offset : offset + t.shape[0]] = np.eye(t.shape[0], dtype=t.dtype)
        piece = matmul(Tensor(place), t)
        out = piece if out is None else add(out, piece)
        offset += t.shape[0]
    return out


def total_loss(l_ml: Tensor, l_con: Tensor | None, l_min: Tensor | None, alpha: float, variant: str) -> Tensor:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    weighted = mul(l_ml, Tensor(np.asarray(alpha, l_ml.dtype.type)))
    if variant == "contrastive":
        if l_con is None:
            raise ValueError("contrastive variant needs l_con")
        return add(weighted, l_con)
    if variant == "min":
        if l_min is None:
            raise ValueError("min variant needs l_min")
        return add(weighted, l_min)
    return weighted
