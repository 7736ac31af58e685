"""Training loop: adaptive-moment updates with decoupled weight decay,
cosine learning-rate schedule with linear warmup, per-epoch checkpointing,
and deterministic resumption.

Every source of randomness (data order, anchor sampling) is derived from
the run seed plus epoch/step counters, so identical configs produce
bit-identical loss logs and checkpoints.
"""

from __future__ import annotations

import csv
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data_io import (
    CheckpointError,
    ToyExtractor,
    image_to_unit,
    load_checkpoint,
    load_image,
    load_manifest,
    load_mask,
    read_tensor,
    save_checkpoint,
)
from .flow import FlowStack
from .latent import DiagonalGaussianLatent
from .losses import (
    DegenerateBatchError,
    LossBreakdown,
    VARIANTS,
    masked_nll,
    outlier_likelihood_min,
    supervised_contrastive,
    total_loss,
)
from .projection import PLACEMENTS, ProjectionHead, sample_anchor_sets
from .synth import downsample_mask
from .tensor import NonFiniteError, Parameter, Tape, Tensor

__all__ = ["TrainConfig", "AdamW", "FlowClasModel", "TrainResult", "lr_at", "train", "load_model"]


@dataclass
class TrainConfig:
    alpha: float = 1.0
    tau: float = 0.10
    proj_dim: int = 256
    flow_steps: int = 8
    lr_max: float = 1e-5
    weight_decay: float = 1e-5
    warmup_steps: int | None = None  # defaults to 3% of total steps
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    n_per_set: int = 256
    contrast_space: str = "latent"
    variant: str = "contrastive"
    natural_image_mode: bool = False
    s_max: float = 2.0
    extractor_seed: int = 0
    extractor_channels: int = 16
    grad_clip: float = 10.0

    # fields that must agree between a checkpoint and a resuming run
    STRUCTURAL = ("flow_steps", "proj_dim", "contrast_space", "extractor_channels", "extractor_seed", "s_max")

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.contrast_space not in PLACEMENTS:
            raise ValueError(f"contrast_space must be one of {PLACEMENTS}, got {self.contrast_space!r}")
        for name in ("alpha",):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("tau", "lr_max", "s_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("proj_dim", "flow_steps", "batch_size", "n_per_set", "extractor_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0 or self.weight_decay < 0 or self.grad_clip <= 0:
            raise ValueError("epochs/weight_decay must be >= 0 and grad_clip positive")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.proj_dim >= self.extractor_channels:
            raise ValueError(
                f"proj_dim ({self.proj_dim}) must be smaller than the feature channel count "
                f"({self.extractor_channels})"
            )
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()


def lr_at(step: int, total_steps: int, warmup_steps: int, lr_max: float) -> float:
    """Linear warmup to lr_max, then cosine decay to zero."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise ValueError(f"warmup_steps ({warmup_steps}) must be < total_steps ({total_steps})")
    if warmup_steps > 0 and step < warmup_steps:
        return lr_max * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Decay applies to every trainable parameter each step regardless of
    whether the step's loss touched it.
    """

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.named_params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.named_params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named_params}

    def zero_grad(self):
        for _, p in self.named_params:
            p.zero_grad()

    def clip_grad_norm(self, max_norm: float) -> float:
        sq = 0.0
        for _, p in self.named_params:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
        norm = math.sqrt(sq)
        if norm > max_norm:
            scale = max_norm / norm
            for _, p in self.named_params:
                p.grad = (p.grad * scale).astype(p.dtype)
        return norm

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for n, p in self.named_params:
            if not p.trainable:
                continue
            g = p.grad
            self.m[n] = (b1 * self.m[n] + (1 - b1) * g).astype(p.dtype)
            self.v[n] = (b2 * self.v[n] + (1 - b2) * g * g).astype(p.dtype)
            m_hat = self.m[n] / c1
            v_hat = self.v[n] / c2
            p.data = (p.data - lr * self.weight_decay * p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                p.dtype
            )

    def state_entries(self) -> dict[str, np.ndarray]:
        out = {}
        for n, _ in self.named_params:
            out[f"opt.m.{n}"] = self.m[n]
            out[f"opt.v.{n}"] = self.v[n]
        return out

    def load_state(self, entries: dict[str, np.ndarray], t: int):
        self.t = int(t)
        for n, p in self.named_params:
            m = entries.get(f"opt.m.{n}")
            v = entries.get(f"opt.v.{n}")
            if m is None or v is None or m.shape != p.data.shape or v.shape != p.data.shape:
                raise CheckpointError(f"optimizer state missing or misshaped for {n}")
            self.m[n] = m.astype(p.dtype)
            self.v[n] = v.astype(p.dtype)


class FlowClasModel:
    """Flow stack, latent Gaussian, and projection head as one unit."""

    def __init__(self, config: TrainConfig, channels: int):
        config.validate()
        if config.proj_dim >= channels:
            raise ValueError(f"proj_dim ({config.proj_dim}) must be < feature channels ({channels})")
        self.config = config
        self.channels = channels
        self.flow = FlowStack(channels, config.flow_steps, seed=config.seed, s_max=config.s_max)
        self.latent = DiagonalGaussianLatent(channels)
        self.projection = ProjectionHead(
            channels, config.proj_dim, seed=config.seed + 1, placement=config.contrast_space
        )

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return (
            self.flow.named_parameters()
            + self.latent.named_parameters()
            + self.projection.named_parameters()
        )

    def checkpoint_entries(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        for i, perm in enumerate(self.flow.permutations()):
            out[f"block{i}.perm"] = perm.astype(np.float32)
        return out

    def load_entries(self, entries: dict[str, np.ndarray], actnorm_initialized: bool):
        perms = []
        for i in range(self.flow.n_blocks):
            key = f"block{i}.perm"
            if key not in entries:
                raise CheckpointError(f"checkpoint missing {key}")
            perms.append(np.rint(entries[key]).astype(np.int64))
        self.flow.set_permutations(perms)
        for name, p in self.named_parameters():
            if name not in entries:
                raise CheckpointError(f"checkpoint missing parameter {name}")
            arr = entries[name]
            if arr.shape != p.data.shape:
                raise CheckpointError(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.data.shape}")
            p.data = arr.astype(p.dtype)
        if actnorm_initialized:
            self.flow.mark_initialized()


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint: Path
    loss_csv: Path
    steps_run: int
    halted: bool = False
    breakdowns: list[LossBreakdown] = field(default_factory=list)


class _FeatureSource:
    """Features plus downsampled masks for manifest records, cached."""

    def __init__(self, records, extractor: ToyExtractor):
        self.records = records
        self.extractor = extractor
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self):
        return len(self.records)

    def get(self, idx: int) -> tuple[np.ndarray, np.ndarray]:
        if idx not in self._cache:
            rec = self.records[idx]
            if rec.feature is not None:
                feat = read_tensor(rec.feature)
            else:
                feat = self.extractor.extract(image_to_unit(load_image(rec.image)))
            if rec.mask is not None:
                mask = load_mask(rec.mask)
                mask_down = downsample_mask(mask, feat.shape[1:])
            else:
                mask_down = np.zeros(feat.shape[1:], dtype=np.uint8)
            self._cache[idx] = (feat, mask_down)
        return self._cache[idx]

    def batch(self, idxs) -> tuple[np.ndarray, np.ndarray]:
        feats, masks = zip(*(self.get(int(i)) for i in idxs))
        return np.stack(feats), np.stack(masks)


def _epoch_order(seed: int, epoch: int, n: int, stream: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF, epoch, stream]))
    return rng.permutation(n)


def _step_seed(seed: int, global_step: int) -> int:
    return (seed * 1_000_003 + global_step) & 0x7FFFFFFF


def train(
    config: TrainConfig,
    mixed_manifest,
    outlier_manifest,
    out_dir,
    resume: Path | None = None,
    stop_after_epoch: int | None = None,
) -> TrainResult:
    """Run the optimization loop and write checkpoints plus a loss CSV.

    ``stop_after_epoch`` interrupts training after that epoch's checkpoint
    while keeping the learning-rate schedule of the full ``config.epochs``
    horizon, so a later resume continues exactly where an uninterrupted run
    would be.
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    mixed_recs = load_manifest(mixed_manifest, require_mask=True)
    outlier_recs = load_manifest(outlier_manifest, require_mask=True)
    if not mixed_recs or not outlier_recs:
        raise ValueError("training needs non-empty mixed and outlier manifests")

    extractor = ToyExtractor(config.extractor_seed, config.extractor_channels)
    mixed = _FeatureSource(mixed_recs, extractor)
    outliers = _FeatureSource(outlier_recs, extractor)
    channels = config.extractor_channels

    model = FlowClasModel(config, channels)
    optimizer = AdamW(model.named_parameters(), weight_decay=config.weight_decay)

    start_epoch = 0
    global_step = 0
    if resume is not None:
        entries, blob = load_checkpoint(resume)
        saved = TrainConfig.from_dict(blob["config"])
        for key in TrainConfig.STRUCTURAL:
            if getattr(saved, key) != getattr(config, key):
                raise CheckpointError(
                    f"cannot resume: config field {key!r} changed "
                    f"({getattr(saved, key)} -> {getattr(config, key)})"
                )
        model.load_entries(entries, blob["actnorm_initialized"])
        optimizer.load_state(entries, blob["opt_step"])
        start_epoch = int(blob["epoch"]) + 1
        global_step = int(blob["global_step"])

    batch = min(config.batch_size, len(mixed))
    steps_per_epoch = max(1, len(mixed) // batch)
    total_steps = max(1, config.epochs * steps_per_epoch)
    warmup = config.warmup_steps if config.warmup_steps is not None else max(1, round(0.03 * total_steps))
    warmup = min(warmup, total_steps - 1)

    loss_csv = out_dir / "loss.csv"
    csv_mode = "a" if resume is not None and loss_csv.exists() else "w"
    ckpt_path = out_dir / "checkpoint.ft"
    halted = False
    breakdowns: list[LossBreakdown] = []

    def save(epoch: int):
        blob = {
            "config": config.to_dict(),
            "channels": channels,
            "epoch": epoch,
            "global_step": global_step,
            "opt_step": optimizer.t,
            "actnorm_initialized": model.flow.initialized,
        }
        entries = model.checkpoint_entries()
        entries.update(optimizer.state_entries())
        save_checkpoint(ckpt_path, entries, blob)
        save_checkpoint(out_dir / f"checkpoint_epoch{epoch:04d}.ft", entries, blob)

    save(start_epoch - 1)
    if config.epochs == 0 or start_epoch >= config.epochs:
        return TrainResult(out_dir, ckpt_path, loss_csv, 0)

    out_batch = min(config.batch_size, len(outliers))
    with open(loss_csv, csv_mode, newline="") as fh:
        writer = csv.writer(fh)
        if csv_mode == "w":
            writer.writerow(["step", "l_ml", "l_con", "l_min", "total", "lr"])
        for epoch in range(start_epoch, config.epochs):
            order = _epoch_order(config.seed, epoch, len(mixed), stream=0)
            out_order = _epoch_order(config.seed, epoch, len(outliers), stream=1)
            for step_in_epoch in range(steps_per_epoch):
                idxs = order[step_in_epoch * batch : step_in_epoch * batch + batch]
                out_idxs = np.take(
                    out_order, np.arange(step_in_epoch * out_batch, (step_in_epoch + 1) * out_batch), mode="wrap"
                )
                xm, ym = mixed.batch(idxs)
                lr = lr_at(global_step, total_steps, warmup, config.lr_max)
                try:
                    bd = _train_step(model, optimizer, config, xm, ym, outliers, out_idxs, lr, global_step)
                except DegenerateBatchError as e:
                    print(f"step {global_step}: skipped batch ({e})", file=sys.stderr)
                    global_step += 1
                    continue
                except NonFiniteError as e:
                    print(f"step {global_step}: non-finite loss, halting ({e})", file=sys.stderr)
                    halted = True
                    break
                writer.writerow(
                    [
                        global_step,
                        f"{bd.l_ml:.8e}",
                        f"{bd.l_con:.8e}",
                        f"{bd.l_min:.8e}",
                        f"{bd.total:.8e}",
                        f"{lr:.8e}",
                    ]
                )
                breakdowns.append(bd)
                global_step += 1
            if halted:
                break
            save(epoch)
            if stop_after_epoch is not None and epoch >= stop_after_epoch:
                break
    return TrainResult(out_dir, ckpt_path, loss_csv, global_step, halted, breakdowns)


def _train_step(model, optimizer, config, xm, ym, outliers, out_idxs, lr, global_step) -> LossBreakdown:
    xm_t = Tensor(xm)
    with Tape() as tape:
        z_m, ld_m = model.flow.forward_with_logdet(xm_t, init=not model.flow.initialized)
        lp_m = model.latent.log_prob_map(z_m)
        l_ml = masked_nll(lp_m, ld_m, ym)

        l_con = None
        l_min = None
        anchors = 0
        variant = config.variant
        if variant == "contrastive":
            xo, yo = outliers.batch(out_idxs)
            xo_t = Tensor(xo)
            z_o, _ = model.flow.forward_with_logdet(xo_t)
            if config.contrast_space == "latent":
                pm = model.projection.project(model.latent.standardize(z_m))
                po = model.projection.project(model.latent.standardize(z_o))
            else:
                pm = model.projection.project(xm_t)
                po = model.projection.project(xo_t)
            try:
                sets = sample_anchor_sets(
                    pm,
                    ym,
                    po,
                    yo,
                    config.n_per_set,
                    seed=_step_seed(config.seed, global_step),
                    include_b_in=config.natural_image_mode,
                )
                l_con = supervised_contrastive(sets, config.tau)
                anchors = 2 * config.n_per_set
            except DegenerateBatchError as e:
                print(f"step {global_step}: contrastive term skipped ({e})", file=sys.stderr)
                variant = "ml_only"
        elif variant == "min":
            l_min = outlier_likelihood_min(lp_m, ld_m, ym)

        total = total_loss(l_ml, l_con, l_min, config.alpha, variant)
        if not np.isfinite(total.data):
            raise NonFiniteError("total loss is not finite")
        optimizer.zero_grad()
        tape.backward(total)
    optimizer.clip_grad_norm(config.grad_clip)
    optimizer.step(lr)
    return LossBreakdown(
        l_ml=float(l_ml.data),
        l_con=float(l_con.data) if l_con is not None else 0.0,
        l_min=float(l_min.data) if l_min is not None else 0.0,
        total=float(total.data),
        inlier_pixels=int((ym == 0).sum()),
        outlier_pixels=int((ym == 1).sum()),
        anchors=anchors,
    )


def load_model(checkpoint_path) -> tuple[FlowClasModel, dict]:
    """Rebuild a model (flow + latent + projection) from a checkpoint."""
    entries, blob = load_checkpoint(checkpoint_path)
    config = TrainConfig.from_dict(blob["config"])
    model = FlowClasModel(config, int(blob["channels"]))
    model.load_entries(entries, blob["actnorm_initialized"])
    return model, blob
