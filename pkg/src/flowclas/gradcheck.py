"""Finite-difference verification of every differentiable path.

Each check builds a small float64 instance, computes analytic gradients via
the tape, and compares against central finite differences (step 1e-3). The
reported number per module is max |analytic - fd| / max(|fd|), which must
stay below 1e-3.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .flow import FlowStack
from .latent import DiagonalGaussianLatent
from .losses import contrastive_pairs_loss, masked_nll, outlier_likelihood_min
from .projection import ProjectionHead, sample_anchor_sets
from .losses import supervised_contrastive

__all__ = ["fd_gradient", "max_rel_err", "run_gradcheck", "TOLERANCE"]

TOLERANCE = 1e-3
FD_EPS = 1e-3


def fd_gradient(loss_fn, param: T.Tensor, eps: float = FD_EPS) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. one tensor."""
    grad = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
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


def max_rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    denom = max(float(np.max(np.abs(fd))), 1e-12)
    return float(np.max(np.abs(analytic.astype(np.float64) - fd)) / denom)


def _check(loss_builder, params: list[T.Tensor]) -> float:
    """Backward once, then FD each parameter; return the worst error."""
    for p in params:
        p.grad = np.zeros_like(p.data) if isinstance(p, T.Parameter) else None
    with T.Tape() as tape:
        loss = loss_builder()
        tape.backward(loss)
    worst = 0.0
    for p in params:
        fd = fd_gradient(lambda: float(loss_builder().data), p)
        worst = max(worst, max_rel_err(p.grad, fd))
    return worst


def _tensor_core_case(rng):
    """One composite touching all fourteen primitives."""
    x = T.Parameter(rng.normal(0, 1, (2, 4, 3, 3)), dtype=np.float64)
    w3 = T.Parameter(rng.normal(0, 0.4, (4, 4, 3, 3)), dtype=np.float64)
    b3 = T.Parameter(rng.normal(0, 0.2, 4), dtype=np.float64)
    w1 = T.Parameter(rng.normal(0, 0.5, (5, 4)), dtype=np.float64)
    b1 = T.Parameter(rng.normal(0, 0.2, 5), dtype=np.float64)
    wm = T.Parameter(rng.normal(0, 0.5, (6, 5)), dtype=np.float64)
    mask = (rng.random((2, 3, 3)) < 0.6).astype(np.float64)
    mask.reshape(-1)[0] = 1.0  # keep at least one pixel selected
    half = T.Tensor(np.asarray(0.5, np.float64))
    one = T.Tensor(np.asarray(1.0, np.float64))

    def loss():
        h = T.relu(T.conv2d_3x3(x, w3, b3))
        h = T.conv2d_1x1(h, w1, b1)
        h = T.l2_normalize_channelwise(h)
        rows = T.gather_mask(h, mask)
        mm = T.matmul(rows, wm, transpose_b=True)
        t = T.tanh(mm)
        e = T.exp(T.mul(t, half))
        lg = T.log(T.add(e, one))
        per_row = lg.sum(axis=1)
        return T.sub(per_row.mean(), T.mul(x.sum(), T.Tensor(np.asarray(0.01, np.float64))))

    return loss, [x, w3, b3, w1, b1, wm]


def _flow_case(rng):
    flow = FlowStack(channels=4, n_blocks=2, seed=7, dtype=np.float64)
    for blk in flow.blocks:
        blk.coupling.w2.data = rng.normal(0, 0.3, blk.coupling.w2.shape)
        blk.coupling.b2.data = rng.normal(0, 0.1, blk.coupling.b2.shape)
    latent = DiagonalGaussianLatent(4, dtype=np.float64)
    latent.mu.data = rng.normal(0, 0.3, latent.mu.shape)
    latent.log_var.data = rng.normal(0, 0.3, latent.log_var.shape)
    batch = rng.normal(0, 1, (2, 4, 2, 2))
    flow.init_data_dependent(batch)
    x = T.Tensor(batch, dtype=np.float64)
    mask = (rng.random((2, 2, 2)) < 0.4).astype(np.float64)
    mask.reshape(-1)[0] = 0.0  # keep at least one inlier pixel

    def loss():
        z, ld = flow.forward_with_logdet(x)
        return masked_nll(latent.log_prob_map(z), ld, mask)

    return loss, flow.parameters() + latent.parameters()


def _latent_case(rng):
    latent = DiagonalGaussianLatent(3, dtype=np.float64)
    latent.mu.data = rng.normal(0, 0.5, latent.mu.shape)
    latent.log_var.data = rng.normal(0, 0.5, latent.log_var.shape)
    z = T.Parameter(rng.normal(0, 1, (2, 3, 2, 2)), dtype=np.float64)
    tenth = T.Tensor(np.asarray(0.1, np.float64))

    def loss():
        lp = latent.log_prob_map(z).sum()
        st = latent.standardize(z).sum()
        return T.add(lp, T.mul(st, tenth))

    return loss, [z, latent.mu, latent.log_var]


def _losses_case(rng):
    raw_a = T.Parameter(rng.normal(0, 1, (4, 5)), dtype=np.float64)
    raw_c = T.Parameter(rng.normal(0, 1, (6, 5)), dtype=np.float64)
    a_lab = np.array([0, 0, 1, 1])
    c_lab = np.array([0, 1, 0, 1, 0, 1])
    lp = T.Parameter(rng.normal(-1, 0.5, (2, 3, 3)), dtype=np.float64)
    ld = T.Parameter(rng.normal(0, 0.5, (2, 3, 3)), dtype=np.float64)
    mask = (rng.random((2, 3, 3)) < 0.5).astype(np.float64)
    mask.reshape(-1)[0] = 0.0
    mask.reshape(-1)[1] = 1.0

    def loss():
        con = contrastive_pairs_loss(
            T.l2_normalize_channelwise(raw_a), a_lab, T.l2_normalize_channelwise(raw_c), c_lab, tau=0.1
        )
        nll = masked_nll(lp, ld, mask)
        lmin = outlier_likelihood_min(lp, ld, mask)
        return T.add(T.add(con, nll), lmin)

    return loss, [raw_a, raw_c, lp, ld]


def _projection_case(rng):
    head = ProjectionHead(6, 3, seed=3, dtype=np.float64)
    flow = FlowStack(channels=6, n_blocks=1, seed=5, dtype=np.float64)
    for blk in flow.blocks:
        blk.coupling.w2.data = rng.normal(0, 0.3, blk.coupling.w2.shape)
    latent = DiagonalGaussianLatent(6, dtype=np.float64)
    batch = rng.normal(0, 1, (2, 6, 3, 3))
    flow.init_data_dependent(batch)
    xm = T.Tensor(batch, dtype=np.float64)
    xo = T.Tensor(rng.normal(0, 1, (2, 6, 3, 3)), dtype=np.float64)
    ym = (rng.random((2, 3, 3)) < 0.5).astype(np.float64)
    ym.reshape(-1)[0] = 0.0
    ym.reshape(-1)[1] = 1.0
    yo = np.ones((2, 3, 3))
    yo.reshape(-1)[0] = 0.0

    def loss():
        zm, _ = flow.forward_with_logdet(xm)
        zo, _ = flow.forward_with_logdet(xo)
        pm = head.project(latent.standardize(zm))
        po = head.project(latent.standardize(zo))
        sets = sample_anchor_sets(pm, ym, po, yo, n_per_set=3, seed=11)
        return supervised_contrastive(sets, tau=0.1)

    return loss, head.parameters() + flow.parameters()


def run_gradcheck(seed: int = 0) -> dict[str, float]:
    """Max relative gradient error per module (all must be < TOLERANCE)."""
    cases = {
        "tensor-core": _tensor_core_case,
        "flow-net": _flow_case,
        "latent-gaussian": _latent_case,
        "losses": _losses_case,
        "contrast-sampler": _projection_case,
    }
    results = {}
    for k, (name, builder) in enumerate(cases.items()):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0x7FFFFFFF, k]))
        loss_fn, params = builder(rng)
        results[name] = _check(loss_fn, params)
    return results
