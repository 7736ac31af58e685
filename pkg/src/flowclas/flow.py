"""Invertible flow stack: ActNorm, channel permutation, affine coupling.

Each block applies the three layers in that order. The forward pass returns
the transformed map together with a per-pixel log |det J| map; the inverse
reconstructs inputs exactly (up to float32 roundoff). Channel selection and
merging inside the coupling layer are expressed as pointwise convolutions
with constant 0/1 matrices, so gradients flow through the standard
primitives.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    Parameter,
    Tensor,
    add,
    conv2d_1x1,
    conv2d_3x3,
    exp,
    log,
    mul,
    relu,
    tanh,
)

__all__ = ["ActNorm", "ChannelPermutation", "AffineCoupling", "FlowBlock", "FlowStack", "FlowError"]

VAR_FLOOR = 1e-6


class FlowError(RuntimeError):
    """Misuse of the flow: uninitialized ActNorm, double init, bad shapes."""


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _selection(rows: np.ndarray, channels: int, dtype) -> Tensor:
    """Constant (len(rows), channels) 0/1 matrix picking the given channels."""
    m = np.zeros((len(rows), channels), dtype=dtype)
    m[np.arange(len(rows)), rows] = 1.0
    return Tensor(m)


class ActNorm:
    """Per-channel affine layer with data-dependent initialization.

    After :meth:`init_from_batch` the initializing batch has zero mean and
    unit variance per channel; variance is floored at ``VAR_FLOOR`` so
    constant channels stay finite.
    """

    def __init__(self, channels: int, dtype=np.float32):
        self.channels = channels
        self.scale = Parameter(np.ones((channels, 1, 1)), dtype=dtype)
        self.bias = Parameter(np.zeros((channels, 1, 1)), dtype=dtype)
        self.initialized = False

    def init_from_batch(self, x) -> None:
        if self.initialized:
            raise FlowError("ActNorm initialized twice")
        arr = _as_array(x).astype(np.float64)
        mean = arr.mean(axis=(0, 2, 3))
        var = np.maximum(arr.var(axis=(0, 2, 3)), VAR_FLOOR)
        self.scale.data = (1.0 / np.sqrt(var)).reshape(-1, 1, 1).astype(self.scale.dtype)
        self.bias.data = (-mean).reshape(-1, 1, 1).astype(self.bias.dtype)
        self.initialized = True

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if not self.initialized:
            raise FlowError("ActNorm used before data-dependent initialization")
        y = mul(add(x, self.bias), self.scale)
        # |s| built from relu so the tape stays within the primitive set
        abs_scale = add(relu(self.scale), relu(mul(self.scale, Tensor(np.asarray(-1.0, self.scale.dtype.type)))))
        logdet = log(abs_scale).sum()
        return y, logdet

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return y / self.scale.data - self.bias.data


class ChannelPermutation:
    """Fixed random channel shuffle; volume preserving (log-det 0)."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.perm = rng.permutation(channels)
        self.inv_perm = np.argsort(self.perm)
        # out channel i reads in channel perm[i]
        self._matrix = _selection(self.perm, channels, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d_1x1(x, self._matrix)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return y[:, self.inv_perm]


class AffineCoupling:
    """RealNVP-style coupling with a two-layer 3x3 convolutional subnet.

    The first ceil(C/2) channels condition the remaining floor(C/2). The raw
    log-scale is soft-clamped to (-s_max, s_max) via s_max * tanh(s / s_max),
    so zero subnet weights give the identity with log-det 0.
    """

    def __init__(self, channels: int, s_max: float = 2.0, rng: np.random.Generator | None = None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        self.channels = channels
        self.n_cond = math.ceil(channels / 2)
        self.n_trans = channels // 2
        self.s_max = float(s_max)
        hidden = self.n_cond
        std = math.sqrt(2.0 / (self.n_cond * 9))
        self.w1 = Parameter(rng.normal(0.0, std, (hidden, self.n_cond, 3, 3)), dtype=dtype)
        self.b1 = Parameter(np.zeros(hidden), dtype=dtype)
        # zero-init output conv: the layer starts as the identity
        self.w2 = Parameter(np.zeros((2 * self.n_trans, hidden, 3, 3)), dtype=dtype)
        self.b2 = Parameter(np.zeros(2 * self.n_trans), dtype=dtype)
        c = channels
        self._sel_cond = _selection(np.arange(self.n_cond), c, dtype)
        self._sel_trans = _selection(np.arange(self.n_cond, c), c, dtype)
        if self.n_trans:
            self._sel_s = _selection(np.arange(self.n_trans), 2 * self.n_trans, dtype)
            self._sel_t = _selection(np.arange(self.n_trans, 2 * self.n_trans), 2 * self.n_trans, dtype)
            self._merge_c = Tensor(self._sel_cond.data.T.copy())
            self._merge_t = Tensor(self._sel_trans.data.T.copy())

    def _scale_translation(self, x_cond: Tensor) -> tuple[Tensor, Tensor]:
        h = relu(conv2d_3x3(x_cond, self.w1, self.b1))
        raw = conv2d_3x3(h, self.w2, self.b2)
        s_raw = conv2d_1x1(raw, self._sel_s)
        t = conv2d_1x1(raw, self._sel_t)
        inv_clamp = Tensor(np.asarray(1.0 / self.s_max, s_raw.dtype.type))
        clamp = Tensor(np.asarray(self.s_max, s_raw.dtype.type))
        s = mul(tanh(mul(s_raw, inv_clamp)), clamp)
        return s, t

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if self.n_trans == 0:
            return x, Tensor(np.asarray(0.0, x.dtype.type))
        x1 = conv2d_1x1(x, self._sel_cond)
        x2 = conv2d_1x1(x, self._sel_trans)
        s, t = self._scale_translation(x1)
        y2 = add(mul(x2, exp(s)), t)
        y = add(conv2d_1x1(x1, self._merge_c), conv2d_1x1(y2, self._merge_t))
        logdet = s.sum(axis=1)
        return y, logdet

    def inverse(self, y: np.ndarray) -> np.ndarray:
        if self.n_trans == 0:
            return y
        y1 = y[:, : self.n_cond]
        y2 = y[:, self.n_cond :]
        s, t = self._scale_translation(Tensor(y1.astype(self.w1.dtype)))
        # dividing by the forward's exp(s) cancels the scale bit-exactly
        x2 = (y2 - t.data) / np.exp(s.data)
        return np.concatenate([y1, x2], axis=1)

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]


class FlowBlock:
    def __init__(self, channels: int, rng: np.random.Generator, s_max: float, dtype):
        self.actnorm = ActNorm(channels, dtype=dtype)
        self.perm = ChannelPermutation(channels, rng, dtype=dtype)
        self.coupling = AffineCoupling(channels, s_max=s_max, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, logdet: Tensor) -> tuple[Tensor, Tensor]:
        x, ld = self.actnorm.forward(x)
        logdet = add(logdet, ld)
        x = self.perm.forward(x)
        x, ld = self.coupling.forward(x)
        logdet = add(logdet, ld)
        return x, logdet

    def inverse(self, y: np.ndarray) -> np.ndarray:
        y = self.coupling.inverse(y)
        y = self.perm.inverse(y)
        return self.actnorm.inverse(y)


class FlowStack:
    """Sequence of invertible blocks with exact log-det accumulation."""

    def __init__(self, channels: int, n_blocks: int, seed: int = 0, s_max: float = 2.0, dtype=np.float32):
        if channels < 1 or n_blocks < 1:
            raise FlowError(f"need channels >= 1 and n_blocks >= 1, got {channels}, {n_blocks}")
        rng = np.random.default_rng(seed)
        self.channels = channels
        self.n_blocks = n_blocks
        self.dtype = np.dtype(dtype)
        self.blocks = [FlowBlock(channels, rng, s_max, dtype) for _ in range(n_blocks)]

    @property
    def initialized(self) -> bool:
        return all(b.actnorm.initialized for b in self.blocks)

    def _check_input(self, arr: np.ndarray):
        if arr.ndim != 4 or arr.shape[1] != self.channels:
            raise FlowError(f"expected (B,{self.channels},H,W) input, got shape {tuple(arr.shape)}")

    def init_data_dependent(self, first_batch) -> None:
        """Initialize every ActNorm sequentially from the first batch."""
        if self.initialized:
            raise FlowError("data-dependent initialization called twice")
        arr = _as_array(first_batch)
        self._check_input(arr)
        h = arr
        for block in self.blocks:
            block.actnorm.init_from_batch(h)
            t, _ = block.forward(Tensor(h.astype(self.dtype)), Tensor(np.asarray(0.0, self.dtype.type)))
            h = t.data

    def forward_with_logdet(self, x, init: bool = False) -> tuple[Tensor, Tensor]:
        """Map features to latents; also return the per-pixel log-det map."""
        if init and not self.initialized:
            self.init_data_dependent(x)
        if not self.initialized:
            raise FlowError("flow used before ActNorm initialization")
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        self._check_input(x.data)
        b, _, h, w = x.shape
        logdet = Tensor(np.zeros((b, h, w), dtype=self.dtype))
        for block in self.blocks:
            x, logdet = block.forward(x, logdet)
        return x, logdet

    def inverse(self, z) -> np.ndarray:
        arr = _as_array(z).astype(self.dtype)
        self._check_input(arr)
        if not self.initialized:
            raise FlowError("flow used before ActNorm initialization")
        for block in reversed(self.blocks):
            arr = block.inverse(arr)
        return arr

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = []
        for i, blk in enumerate(self.blocks):
            out.append((f"block{i}.actnorm.scale", blk.actnorm.scale))
            out.append((f"block{i}.actnorm.bias", blk.actnorm.bias))
            out.append((f"block{i}.coupling.w1", blk.coupling.w1))
            out.append((f"block{i}.coupling.b1", blk.coupling.b1))
            out.append((f"block{i}.coupling.w2", blk.coupling.w2))
            out.append((f"block{i}.coupling.b2", blk.coupling.b2))
        return out

    def permutations(self) -> list[np.ndarray]:
        return [blk.perm.perm.copy() for blk in self.blocks]

    def set_permutations(self, perms) -> None:
        if len(perms) != self.n_blocks:
            raise FlowError(f"expected {self.n_blocks} permutations, got {len(perms)}")
        for blk, p in zip(self.blocks, perms):
            p = np.asarray(p, dtype=np.int64)
            if sorted(p.tolist()) != list(range(self.channels)):
                raise FlowError("invalid permutation in checkpoint")
            blk.perm.perm = p
            blk.perm.inv_perm = np.argsort(p)
            blk.perm._matrix = _selection(p, self.channels, self.dtype)

    def mark_initialized(self) -> None:
        """Restore path: ActNorm parameters came from a checkpoint."""
        for blk in self.blocks:
            blk.actnorm.initialized = True
