"""Learnable diagonal Gaussian over the flow's latent space."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Parameter, Tensor, add, exp, mul, sub

__all__ = ["DiagonalGaussianLatent", "LOG_2PI"]

LOG_2PI = math.log(2.0 * math.pi)


class DiagonalGaussianLatent:
    """N(mu, diag(exp(log_var))) with both parameters learnable.

    The log-variance parametrization keeps the covariance strictly positive
    without constraints. Initialization is the standard normal.
    """

    def __init__(self, channels: int, dtype=np.float32):
        self.channels = channels
        self.mu = Parameter(np.zeros((channels, 1, 1)), dtype=dtype)
        self.log_var = Parameter(np.zeros((channels, 1, 1)), dtype=dtype)

    def _check(self, z: Tensor):
        if z.ndim != 4 or z.shape[1] != self.channels:
            raise ValueError(f"expected (B,{self.channels},H,W) latents, got shape {tuple(z.shape)}")

    def log_prob_map(self, z: Tensor) -> Tensor:
        """Per-pixel log density, shape (B,H,W)."""
        if not isinstance(z, Tensor):
            z = Tensor(np.asarray(z, dtype=self.mu.dtype))
        self._check(z)
        neg_one = Tensor(np.asarray(-1.0, self.mu.dtype.type))
        diff = sub(z, self.mu)
        quad = mul(mul(diff, diff), exp(mul(self.log_var, neg_one)))
        const = Tensor(np.asarray(LOG_2PI, self.mu.dtype.type))
        per_channel = mul(add(add(quad, self.log_var), const), Tensor(np.asarray(-0.5, self.mu.dtype.type)))
        return per_channel.sum(axis=1)

    def standardize(self, z: Tensor) -> Tensor:
        """Map latents to standard-normal coordinates: (z - mu) / sigma."""
        if not isinstance(z, Tensor):
            z = Tensor(np.asarray(z, dtype=self.mu.dtype))
        self._check(z)
        inv_sigma = exp(mul(self.log_var, Tensor(np.asarray(-0.5, self.mu.dtype.type))))
        return mul(sub(z, self.mu), inv_sigma)

    def unstandardize(self, z_bar) -> np.ndarray:
        arr = z_bar.data if isinstance(z_bar, Tensor) else np.asarray(z_bar)
        sigma = np.exp(0.5 * self.log_var.data)
        return arr * sigma + self.mu.data

    def parameters(self) -> list[Parameter]:
        return [self.mu, self.log_var]

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return [("latent.mu", self.mu), ("latent.log_var", self.log_var)]
