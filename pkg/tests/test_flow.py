import numpy as np
import pytest

from flowclas.flow import ActNorm, AffineCoupling, FlowError, FlowStack
from flowclas.latent import DiagonalGaussianLatent
from flowclas.losses import masked_nll
from flowclas.tensor import Tape, Tensor

from oracles import fd_gradient, fd_jacobian, rel_err


def make_identity_stack(channels, n_blocks, seed=0):
    """Unit actnorm scales, zero biases, zero subnet weights."""
    flow = FlowStack(channels, n_blocks, seed=seed)
    for blk in flow.blocks:
        blk.actnorm.initialized = True
        blk.actnorm.scale.data[:] = 1.0
        blk.actnorm.bias.data[:] = 0.0
        blk.coupling.w1.data[:] = 0.0
        blk.coupling.w2.data[:] = 0.0
    return flow


def make_random_stack(channels, n_blocks, seed, wscale=0.3, dtype=np.float32, hw=(3, 3)):
    """Randomized couplings, then sequential data-dependent init."""
    rng = np.random.default_rng(seed)
    flow = FlowStack(channels, n_blocks, seed=seed, dtype=dtype)
    for blk in flow.blocks:
        blk.coupling.w2.data = rng.normal(0, wscale, blk.coupling.w2.shape).astype(dtype)
        blk.coupling.b2.data = rng.normal(0, wscale / 2, blk.coupling.b2.shape).astype(dtype)
    flow.init_data_dependent(rng.normal(0, 1, (8, channels) + hw).astype(dtype))
    return flow


def total_permutation(flow):
    perm = np.arange(flow.channels)
    for blk in flow.blocks:
        perm = perm[blk.perm.perm]
    return perm


class TestIdentityBehavior:
    def test_identity_stack_permutes_only(self):
        rng = np.random.default_rng(0)
        flow = make_identity_stack(6, 3, seed=5)
        x = rng.normal(0, 1, (2, 6, 4, 4)).astype(np.float32)
        z, logdet = flow.forward_with_logdet(x)
        np.testing.assert_array_equal(logdet.data, np.zeros((2, 4, 4), dtype=np.float32))
        np.testing.assert_array_equal(z.data, x[:, total_permutation(flow)])

    def test_zero_tensor_through_identity_stack(self):
        flow = make_identity_stack(4, 2)
        z, _ = flow.forward_with_logdet(np.zeros((1, 4, 3, 3), dtype=np.float32))
        np.testing.assert_array_equal(z.data, np.zeros((1, 4, 3, 3), dtype=np.float32))

    def test_identity_inverse_is_inverse_permutation(self):
        rng = np.random.default_rng(1)
        flow = make_identity_stack(5, 4, seed=9)
        z = rng.normal(0, 1, (2, 5, 3, 3)).astype(np.float32)
        x = flow.inverse(z)
        z2, _ = flow.forward_with_logdet(x)
        np.testing.assert_allclose(z2.data, z, atol=1e-6)


class TestActNorm:
    def test_reciprocal_scales_cancel_in_logdet(self):
        an = ActNorm(2)
        an.initialized = True
        an.scale.data = np.array([2.0, 0.5], dtype=np.float32).reshape(2, 1, 1)
        _, logdet = an.forward(Tensor(np.ones((1, 2, 3, 3), dtype=np.float32)))
        assert abs(float(logdet.data)) < 1e-7

    def test_init_on_standardized_batch_is_identity(self):
        rng = np.random.default_rng(2)
        raw = rng.normal(0, 1, (16, 3, 8, 8))
        raw = (raw - raw.mean(axis=(0, 2, 3), keepdims=True)) / raw.std(axis=(0, 2, 3), keepdims=True)
        an = ActNorm(3)
        an.init_from_batch(raw.astype(np.float32))
        np.testing.assert_allclose(an.scale.data.reshape(-1), np.ones(3), atol=1e-3)
        np.testing.assert_allclose(an.bias.data.reshape(-1), np.zeros(3), atol=1e-4)

    def test_constant_channel_variance_floored(self):
        batch = np.zeros((4, 2, 3, 3), dtype=np.float32)
        batch[:, 1] = 7.0
        an = ActNorm(2)
        an.init_from_batch(batch)
        assert np.all(np.isfinite(an.scale.data))
        assert np.all(an.scale.data != 0)
        np.testing.assert_allclose(an.scale.data.reshape(-1), [1e3, 1e3], rtol=1e-4)

    def test_init_statistics_recomputed(self):
        rng = np.random.default_rng(3)
        batch = rng.normal(3.0, 2.5, (8, 4, 6, 6)).astype(np.float32)
        an = ActNorm(4)
        an.init_from_batch(batch)
        out, _ = an.forward(Tensor(batch))
        mean = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        assert np.max(np.abs(mean)) < 1e-4
        assert np.max(np.abs(var - 1)) < 1e-3

    def test_strict_mode_errors(self):
        an = ActNorm(2)
        with pytest.raises(FlowError, match="before"):
            an.forward(Tensor(np.ones((1, 2, 2, 2), dtype=np.float32)))
        an.init_from_batch(np.random.default_rng(0).normal(0, 1, (4, 2, 2, 2)).astype(np.float32))
        with pytest.raises(FlowError, match="twice"):
            an.init_from_batch(np.ones((4, 2, 2, 2), dtype=np.float32))


class TestLogDetExactness:
    def test_single_block_2ch_vs_fd_jacobian(self):
        flow = make_random_stack(2, 1, seed=11, wscale=0.5, dtype=np.float64, hw=(1, 1))
        x0 = np.random.default_rng(4).normal(0, 1, (1, 2, 1, 1))

        def f(flat):
            z, _ = flow.forward_with_logdet(flat.reshape(1, 2, 1, 1))
            return z.data.reshape(-1)

        jac = fd_jacobian(f, x0.reshape(-1), eps=1e-5)
        expected = np.log(abs(np.linalg.det(jac)))
        _, logdet = flow.forward_with_logdet(x0)
        analytic = float(logdet.data.reshape(-1)[0])
        assert abs(analytic - expected) / abs(expected) < 1e-4

    @pytest.mark.parametrize("channels", [2, 4, 6])
    def test_deep_stack_vs_fd_jacobian(self, channels):
        for seed in (0, 1):
            flow = make_random_stack(channels, 3, seed=20 + seed, wscale=0.4, dtype=np.float64, hw=(1, 1))
            x0 = np.random.default_rng(50 + seed).normal(0, 1, (1, channels, 1, 1))

            def f(flat):
                z, _ = flow.forward_with_logdet(flat.reshape(1, channels, 1, 1))
                return z.data.reshape(-1)

            jac = fd_jacobian(f, x0.reshape(-1), eps=1e-5)
            sign, expected = np.linalg.slogdet(jac)
            _, logdet = flow.forward_with_logdet(x0)
            analytic = float(logdet.data.reshape(-1)[0])
            assert abs(analytic - expected) / max(abs(expected), 1e-3) < 1e-3


class TestInvertibility:
    @pytest.mark.parametrize("n_blocks", [1, 8])
    def test_roundtrip(self, n_blocks):
        rng = np.random.default_rng(6)
        flow = make_random_stack(6, n_blocks, seed=31, wscale=0.05, hw=(4, 4))
        for _ in range(5):
            x = rng.normal(0, 1, (2, 6, 4, 4)).astype(np.float32)
            z, _ = flow.forward_with_logdet(x)
            assert np.abs(flow.inverse(z.data) - x).max() < 1e-4

    def test_inverse_then_forward(self):
        rng = np.random.default_rng(7)
        flow = make_random_stack(4, 4, seed=33, wscale=0.05, hw=(3, 3))
        z = rng.normal(0, 1, (2, 4, 3, 3)).astype(np.float32)
        x = flow.inverse(z)
        z2, _ = flow.forward_with_logdet(x)
        assert np.abs(z2.data - z).max() < 1e-4


class TestGradients:
    def test_masked_nll_grads_match_fd(self):
        flow = make_random_stack(4, 2, seed=41, wscale=0.3, dtype=np.float64, hw=(2, 2))
        latent = DiagonalGaussianLatent(4, dtype=np.float64)
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(0, 1, (2, 4, 2, 2)), dtype=np.float64)
        mask = (rng.random((2, 2, 2)) < 0.3).astype(np.float64)
        mask.reshape(-1)[0] = 0.0

        def loss():
            z, ld = flow.forward_with_logdet(x)
            return masked_nll(latent.log_prob_map(z), ld, mask)

        with Tape() as tape:
            tape.backward(loss())
        for p in flow.parameters() + latent.parameters():
            fd = fd_gradient(lambda: float(loss().data), p.data)
            assert rel_err(p.grad, fd) < 1e-3


class TestCouplingEdgeCases:
    def test_single_channel_coupling_is_identity(self):
        coupling = AffineCoupling(1)
        x = Tensor(np.random.default_rng(0).normal(0, 1, (2, 1, 3, 3)).astype(np.float32))
        y, logdet = coupling.forward(x)
        np.testing.assert_array_equal(y.data, x.data)
        assert float(logdet.data) == 0.0
        np.testing.assert_array_equal(coupling.inverse(x.data), x.data)

    def test_odd_channel_split(self):
        coupling = AffineCoupling(5)
        assert coupling.n_cond == 3
        assert coupling.n_trans == 2
        rng = np.random.default_rng(1)
        coupling.w2.data = rng.normal(0, 0.3, coupling.w2.shape).astype(np.float32)
        x = rng.normal(0, 1, (2, 5, 3, 3)).astype(np.float32)
        y, _ = coupling.forward(Tensor(x))
        assert np.abs(coupling.inverse(y.data) - x).max() < 1e-5

    def test_zero_weights_identity_with_zero_logdet(self):
        coupling = AffineCoupling(6)
        coupling.w1.data[:] = 0.0
        coupling.w2.data[:] = 0.0
        x = np.random.default_rng(2).normal(0, 1, (1, 6, 2, 2)).astype(np.float32)
        y, logdet = coupling.forward(Tensor(x))
        np.testing.assert_array_equal(y.data, x)
        np.testing.assert_array_equal(logdet.data, np.zeros((1, 2, 2), dtype=np.float32))


class TestStackContracts:
    def test_forward_before_init_rejected(self):
        flow = FlowStack(4, 2)
        with pytest.raises(FlowError, match="initialization"):
            flow.forward_with_logdet(np.zeros((1, 4, 2, 2), dtype=np.float32))

    def test_double_init_rejected(self):
        flow = FlowStack(4, 2)
        batch = np.random.default_rng(0).normal(0, 1, (4, 4, 2, 2)).astype(np.float32)
        flow.init_data_dependent(batch)
        with pytest.raises(FlowError, match="twice"):
            flow.init_data_dependent(batch)

    def test_forward_init_flag(self):
        flow = FlowStack(4, 2)
        batch = np.random.default_rng(0).normal(0, 1, (4, 4, 2, 2)).astype(np.float32)
        z, _ = flow.forward_with_logdet(batch, init=True)
        assert flow.initialized
        assert z.shape == (4, 4, 2, 2)

    def test_wrong_channel_count_rejected(self):
        flow = FlowStack(4, 1)
        with pytest.raises(FlowError, match="expected"):
            flow.init_data_dependent(np.zeros((1, 3, 2, 2), dtype=np.float32))

    def test_named_parameters_follow_checkpoint_scheme(self):
        flow = FlowStack(4, 2)
        names = [n for n, _ in flow.named_parameters()]
        assert "block0.actnorm.scale" in names
        assert "block1.coupling.w2" in names
        assert len(names) == 2 * 6

    def test_permutation_restore_roundtrip(self):
        flow = FlowStack(6, 3, seed=12)
        perms = flow.permutations()
        other = FlowStack(6, 3, seed=99)
        other.set_permutations(perms)
        for a, b in zip(other.permutations(), perms):
            np.testing.assert_array_equal(a, b)
        with pytest.raises(FlowError, match="permutation"):
            other.set_permutations([np.zeros(6, dtype=int)] * 3)
