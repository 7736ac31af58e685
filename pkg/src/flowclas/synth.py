"""Pseudo-outlier synthesis: paste masked objects from an auxiliary set into
anomaly-free images, producing mixed images with binary masks at full and
feature resolution.

Compositing is byte-exact: pixels outside the pasted mask are identical to
the inlier image, pixels inside are identical to the resized object. Masks
are resampled nearest-neighbor so they stay binary; object pixels are
resampled bilinearly.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data_io import load_image, load_manifest, load_mask, save_image, save_mask, write_manifest

__all__ = [
    "MixedSample",
    "PasteError",
    "PasteSkipped",
    "paste_object",
    "downsample_mask",
    "build_mixed_dataset",
    "SCALE_RANGE",
    "MAX_PLACEMENT_ATTEMPTS",
]

# fraction of the shorter target side spanned by the pasted object
SCALE_RANGE = (0.1, 0.5)
MAX_PLACEMENT_ATTEMPTS = 10


class PasteError(ValueError):
    """Invalid paste inputs (empty object mask, channel mismatch)."""


class PasteSkipped(RuntimeError):
    """No valid placement found within the attempt budget."""


@dataclass
class MixedSample:
    image: np.ndarray
    mask: np.ndarray
    source_in: str = ""
    source_out: str = ""
    scale: float = 1.0
    offset: tuple[int, int] = (0, 0)


def _resize(arr: np.ndarray, hw: tuple[int, int], nearest: bool) -> np.ndarray:
    im = Image.fromarray(arr)
    resample = Image.NEAREST if nearest else Image.BILINEAR
    return np.asarray(im.resize((hw[1], hw[0]), resample=resample))


def paste_object(x_in: np.ndarray, x_out: np.ndarray, y_out: np.ndarray, rng_seed: int) -> MixedSample:
    """Composite one randomly scaled object from ``x_out`` into ``x_in``.

    The object (the bounding box of ``y_out``) is scaled so its longer side
    spans a uniform fraction of the shorter target side, then placed fully
    inside the target at a random offset. Deterministic for a given seed.
    """
    x_in = np.asarray(x_in, dtype=np.uint8)
    x_out = np.asarray(x_out, dtype=np.uint8)
    y = np.asarray(y_out)
    if x_in.ndim != 3 or x_out.ndim != 3 or x_in.shape[2] != x_out.shape[2]:
        raise PasteError(f"image channel mismatch: {x_in.shape} vs {x_out.shape}")
    if y.shape != x_out.shape[:2]:
        raise PasteError(f"object mask shape {y.shape} does not match outlier image {x_out.shape[:2]}")
    ys, xs = np.nonzero(y)
    if ys.size == 0:
        raise PasteError("object mask is empty")
    h, w = x_in.shape[:2]
    r0, r1 = ys.min(), ys.max() + 1
    c0, c1 = xs.min(), xs.max() + 1
    crop_img = x_out[r0:r1, c0:c1]
    crop_mask = (y[r0:r1, c0:c1] > 0).astype(np.uint8)
    bh, bw = crop_mask.shape

    rng = np.random.default_rng(rng_seed)
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        u = rng.uniform(*SCALE_RANGE)
        target_long = u * min(h, w)
        factor = target_long / max(bh, bw)
        nh = max(1, round(bh * factor))
        nw = max(1, round(bw * factor))
        if nh > h or nw > w:
            continue
        rm = _resize(crop_mask * 255, (nh, nw), nearest=True)
        rm = (rm > 0).astype(np.uint8)
        if not rm.any():
            continue
        ri = _resize(crop_img, (nh, nw), nearest=False)
        oy = int(rng.integers(0, h - nh + 1))
        ox = int(rng.integers(0, w - nw + 1))
        y_mix = np.zeros((h, w), dtype=np.uint8)
        y_mix[oy : oy + nh, ox : ox + nw] = rm
        canvas = np.zeros_like(x_in)
        canvas[oy : oy + nh, ox : ox + nw] = ri
        x_mix = np.where(y_mix[..., None].astype(bool), canvas, x_in)
        return MixedSample(image=x_mix, mask=y_mix, scale=float(factor), offset=(oy, ox))
    raise PasteSkipped(f"no valid placement after {MAX_PLACEMENT_ATTEMPTS} attempts")


def downsample_mask(y_mix: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Reduce a binary mask: an output pixel is 1 iff any covered input is 1.

    Block boundaries are placed by rounding, so uneven ratios are fine. The
    any-anomaly rule is conservative: shrinking never hides an anomaly.
    """
    m = np.asarray(y_mix)
    if not np.all(np.isin(np.unique(m), (0, 1))):
        raise ValueError("mask must be binary")
    h, w = m.shape
    th, tw = int(target_hw[0]), int(target_hw[1])
    if th < 1 or tw < 1:
        raise ValueError(f"target dims must be positive, got {target_hw}")
    rb = np.round(np.arange(th + 1) * h / th).astype(np.int64)
    cb = np.round(np.arange(tw + 1) * w / tw).astype(np.int64)
    out = np.zeros((th, tw), dtype=np.uint8)
    for i in range(th):
        rows = m[rb[i] : rb[i + 1]]
        if rows.size == 0:
            continue
        row_any = rows.any(axis=0)
        for j in range(tw):
            seg = row_any[cb[j] : cb[j + 1]]
            out[i, j] = 1 if seg.size and seg.any() else 0
    return out


def build_mixed_dataset(inlier_manifest, outlier_manifest, count: int, seed: int, out_dir) -> Path:
    """Generate ``count`` mixed samples on disk with a provenance manifest.

    Per-sample seeds are derived as seed XOR index, so generation order does
    not matter and identical seeds reproduce the dataset bit-exactly.
    Unreadable source entries are reported on stderr and skipped.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "mixed.jsonl"
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    if count == 0:
        write_manifest(manifest_path, [])
        return manifest_path

    # unreadable files are reported per sample and skipped, so don't
    # pre-validate existence here
    inliers = load_manifest(inlier_manifest, check_files=False)
    outliers = load_manifest(outlier_manifest, require_mask=True, check_files=False)
    if not inliers or not outliers:
        raise ValueError("both source manifests must be non-empty")

    rows = []
    failures = []
    for k in range(count):
        sample_seed = (int(seed) ^ k) & 0xFFFFFFFF
        pick = np.random.default_rng(np.random.SeedSequence([sample_seed, 0x5E7]))
        rec_in = inliers[int(pick.integers(len(inliers)))]
        rec_out = outliers[int(pick.integers(len(outliers)))]
        try:
            x_in = load_image(rec_in.image)
            x_out = load_image(rec_out.image)
            y_out = load_mask(rec_out.mask)
            sample = paste_object(x_in, x_out, y_out, sample_seed)
        except (OSError, ValueError, PasteSkipped) as e:
            failures.append(f"sample {k}: {e}")
            continue
        img_rel = f"images/mix_{k:05d}.png"
        mask_rel = f"masks/mix_{k:05d}.png"
        save_image(out_dir / img_rel, sample.image)
        save_mask(out_dir / mask_rel, sample.mask)
        rows.append(
            {
                "id": f"mix_{k:05d}",
                "image": img_rel,
                "mask": mask_rel,
                "source_in": rec_in.id,
                "source_out": rec_out.id,
                "scale": sample.scale,
                "offset": list(sample.offset),
            }
        )
    for msg in failures:
        print(f"build_mixed_dataset: skipped {msg}", file=sys.stderr)
    if not rows:
        raise RuntimeError(f"all {count} samples failed: {failures[:3]}")
    write_manifest(manifest_path, rows)
    return manifest_path
