"""Inference-time anomaly scoring: per-pixel nats-per-dimension maps,
bilinear upsampling to image resolution, and heatmap export."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .latent import DiagonalGaussianLatent
from .tensor import Tensor

__all__ = ["ScoreMap", "npd_map", "bilinear_upsample", "export_heatmap"]


@dataclass
class ScoreMap:
    """Native-resolution scores for one image, optionally upsampled."""

    scores: np.ndarray
    source_id: str = ""
    upsampled: np.ndarray | None = field(default=None)

    def at_resolution(self, target_hw: tuple[int, int]) -> np.ndarray:
        if self.upsampled is not None and self.upsampled.shape == tuple(target_hw):
            return self.upsampled
        self.upsampled = bilinear_upsample(self.scores, target_hw)
        return self.upsampled


def npd_map(z, latent: DiagonalGaussianLatent, logdet=None) -> np.ndarray:
    """Anomaly score -(1/C) log p_Z(z) per pixel, shape (B,H,W).

    The Jacobian term is excluded by definition; pass ``logdet`` to fold in
    -(1/C) log|det J| as an experimental alternative.
    """
    if not isinstance(z, Tensor):
        z = Tensor(np.asarray(z, dtype=latent.mu.dtype))
    c = latent.channels
    log_prob = latent.log_prob_map(z).data.astype(np.float64)
    if logdet is not None:
        ld = logdet.data if isinstance(logdet, Tensor) else np.asarray(logdet)
        log_prob = log_prob + ld.astype(np.float64)
    return (-(1.0 / c) * log_prob).astype(z.dtype)


def bilinear_upsample(src: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear interpolation of a 2-D map."""
    h, w = src.shape
    out_h, out_w = int(target_hw[0]), int(target_hw[1])
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target dimensions must be positive, got {target_hw}")
    src64 = src.astype(np.float64)
    ys = np.arange(out_h) * ((h - 1) / (out_h - 1)) if out_h > 1 else np.zeros(1)
    xs = np.arange(out_w) * ((w - 1) / (out_w - 1)) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = src64[np.ix_(y0, x0)] * (1 - wx) + src64[np.ix_(y0, x1)] * wx
    bot = src64[np.ix_(y1, x0)] * (1 - wx) + src64[np.ix_(y1, x1)] * wx
    return (top * (1 - wy) + bot * wy).astype(src.dtype)


def export_heatmap(score: ScoreMap, target_hw: tuple[int, int], out_stem) -> tuple[Path, Path]:
    """Write `<stem>.score.ft` (raw upsampled scores) and `<stem>.heat.png`.

    Raw scores go to the tensor container bit-exactly; the PNG is min-max
    normalized over this single image (constant maps render mid-gray).
    """
    from .data_io import write_tensor

    out_stem = Path(out_stem)
    up = score.at_resolution(target_hw).astype(np.float32)
    ft_path = Path(str(out_stem) + ".score.ft")
    png_path = Path(str(out_stem) + ".heat.png")
    write_tensor(ft_path, up)
    lo, hi = float(up.min()), float(up.max())
    if hi > lo:
        gray = np.round((up.astype(np.float64) - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        gray = np.full(up.shape, 128, dtype=np.uint8)
    Image.fromarray(gray, mode="L").save(png_path)
    return ft_path, png_path


def score_images(checkpoint_path, images_manifest, out_dir) -> list[tuple[Path, Path]]:
    """Score every manifest image against a trained checkpoint.

    Emits `<id>.score.ft` and `<id>.heat.png` per input, with scores
    upsampled to the source image resolution.
    """
    from .data_io import ToyExtractor, image_to_unit, load_image, load_manifest, read_tensor
    from .trainer import load_model

    model, _ = load_model(checkpoint_path)
    extractor = ToyExtractor(model.config.extractor_seed, model.config.extractor_channels)
    records = load_manifest(images_manifest)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for rec in records:
        img = load_image(rec.image)
        feat = read_tensor(rec.feature) if rec.feature is not None else extractor.extract(image_to_unit(img))
        z, _ = model.flow.forward_with_logdet(feat[None])
        scores = npd_map(z, model.latent)[0]
        sm = ScoreMap(scores=scores, source_id=rec.id)
        written.append(export_heatmap(sm, img.shape[:2], out_dir / rec.id))
    return written
