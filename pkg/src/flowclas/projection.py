"""Projection head and balanced anchor/candidate set sampling.

The head is a pointwise convolution to a lower dimension followed by
channel-wise L2 normalization, applied either to standardized flow latents
(default) or to raw encoder features (the feature-space ablation). Sampling
draws equally sized inlier/outlier sets from the mixed and outlier images so
the contrastive loss sees balanced classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import DegenerateBatchError
from .tensor import Parameter, Tensor, conv2d_1x1, gather_mask, l2_normalize_channelwise, matmul

__all__ = ["ProjectionHead", "AnchorSets", "sample_anchor_sets", "PLACEMENTS"]

PLACEMENTS = ("latent", "feature")


class ProjectionHead:
    """1x1 convolution C -> C' plus per-pixel L2 normalization (C' < C)."""

    def __init__(self, in_channels: int, out_channels: int, seed: int = 0, placement: str = "latent", dtype=np.float32):
        if out_channels >= in_channels:
            raise ValueError(f"projection must reduce dimensionality: C'={out_channels} >= C={in_channels}")
        if placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {placement!r}, expected one of {PLACEMENTS}")
        rng = np.random.default_rng(seed)
        self.placement = placement
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.w = Parameter(rng.normal(0.0, 1.0 / np.sqrt(in_channels), (out_channels, in_channels)), dtype=dtype)
        self.b = Parameter(np.zeros(out_channels), dtype=dtype)

    def project(self, x: Tensor) -> Tensor:
        """Map (B,C,H,W) to (B,C',H,W) with unit-norm channel vectors."""
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected (B,{self.in_channels},H,W), got {tuple(x.shape)}")
        return l2_normalize_channelwise(conv2d_1x1(x, self.w, self.b))

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return [("proj.w", self.w), ("proj.b", self.b)]


@dataclass
class AnchorSets:
    """Balanced sample sets with their source pixel coordinates (b, i, j)."""

    a_in: Tensor
    a_ood: Tensor
    b_ood: Tensor
    b_in: Tensor | None
    coords: dict[str, np.ndarray]

    @property
    def n_per_set(self) -> int:
        return self.a_in.shape[0]


def _binary(mask, name: str) -> np.ndarray:
    m = np.asarray(mask)
    vals = np.unique(m)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError(f"{name} must be binary")
    return m.astype(bool)


def _sample_region(projected: Tensor, region: np.ndarray, n: int, rng: np.random.Generator):
    """Draw n pixel vectors from the region, without replacement if possible."""
    coords = np.argwhere(region)
    k = coords.shape[0]
    if k == 0:
        raise DegenerateBatchError("anchor sampling: required region is empty batch-wide")
    idx = rng.choice(k, size=n, replace=k < n)
    gathered = gather_mask(projected, region)
    sel = np.zeros((n, k), dtype=projected.dtype)
    sel[np.arange(n), idx] = 1.0
    return matmul(Tensor(sel), gathered), coords[idx]


def sample_anchor_sets(
    projected_mix: Tensor,
    mask_mix,
    projected_out: Tensor,
    mask_out,
    n_per_set: int,
    seed: int,
    include_b_in: bool = False,
) -> AnchorSets:
    """Build the four (or three) equally sized sets for the contrastive loss.

    Inlier/outlier anchors come from the mixed images' projected pixels
    split by the downsampled mask; the extra outlier (and optional inlier)
    sets come from the outlier images. Deterministic for a given seed.
    """
    if n_per_set < 1:
        raise ValueError(f"n_per_set must be >= 1, got {n_per_set}")
    m_mix = _binary(mask_mix, "mixed mask")
    m_out = _binary(mask_out, "outlier mask")
    if m_mix.shape != (projected_mix.shape[0],) + tuple(projected_mix.shape[2:]):
        raise ValueError(f"mixed mask shape {m_mix.shape} does not match projections {tuple(projected_mix.shape)}")
    if m_out.shape != (projected_out.shape[0],) + tuple(projected_out.shape[2:]):
        raise ValueError(f"outlier mask shape {m_out.shape} does not match projections {tuple(projected_out.shape)}")

    regions = [
        ("a_in", projected_mix, ~m_mix),
        ("a_ood", projected_mix, m_mix),
        ("b_ood", projected_out, m_out),
    ]
    if include_b_in:
        regions.append(("b_in", projected_out, ~m_out))

    vectors: dict[str, Tensor] = {}
    coords: dict[str, np.ndarray] = {}
    for k, (name, proj, region) in enumerate(regions):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0x7FFFFFFF, k]))
        vectors[name], coords[name] = _sample_region(proj, region, n_per_set, rng)
    return AnchorSets(
        a_in=vectors["a_in"],
        a_ood=vectors["a_ood"],
        b_ood=vectors["b_ood"],
        b_in=vectors.get("b_in"),
        coords=coords,
    )
