import math

import numpy as np
import pytest

from flowclas.losses import (
    DegenerateBatchError,
    contrastive_pairs_loss,
    masked_nll,
    outlier_likelihood_min,
    supervised_contrastive,
    total_loss,
)
from flowclas.projection import AnchorSets
from flowclas.tensor import Parameter, Tape, Tensor, l2_normalize_channelwise

from oracles import direct_contrastive, fd_gradient, loop_masked_mean, rel_err


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def unit_rows(rng, n, d):
    v = rng.normal(0, 1, (n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestMaskedNLL:
    def test_all_inlier_constant(self):
        lp = t64(np.full((1, 2, 2), -0.918939))
        ld = t64(np.zeros((1, 2, 2)))
        out = masked_nll(lp, ld, np.zeros((1, 2, 2)))
        assert abs(float(out.data) - 0.918939) < 1e-9

    def test_single_surviving_pixel(self):
        lp = np.full((1, 2, 2), 5.0)
        ld = np.full((1, 2, 2), 9.0)
        mask = np.ones((1, 2, 2))
        mask[0, 1, 1] = 0
        lp[0, 1, 1] = -2.0
        ld[0, 1, 1] = 0.5
        out = masked_nll(t64(lp), t64(ld), mask)
        assert abs(float(out.data) - 1.5) < 1e-12

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            lp = rng.normal(-1, 1, (2, 4, 5))
            ld = rng.normal(0, 1, (2, 4, 5))
            mask = (rng.random((2, 4, 5)) < 0.5).astype(np.float64)
            mask.reshape(-1)[0] = 0
            expected = loop_masked_mean(lp + ld, mask, select=0, sign=-1.0)
            got = float(masked_nll(t64(lp), t64(ld), mask).data)
            assert abs(got - expected) < 1e-6 * max(1.0, abs(expected))

    def test_all_ones_mask_rejected_with_skip_signal(self):
        lp = t64(np.zeros((1, 2, 2)))
        with pytest.raises(DegenerateBatchError):
            masked_nll(lp, t64(np.zeros((1, 2, 2))), np.ones((1, 2, 2)))

    def test_invariant_to_masked_out_values(self):
        rng = np.random.default_rng(1)
        lp = rng.normal(0, 1, (1, 3, 3))
        ld = rng.normal(0, 1, (1, 3, 3))
        mask = (rng.random((1, 3, 3)) < 0.5).astype(np.float64)
        mask.reshape(-1)[0] = 0
        base = float(masked_nll(t64(lp), t64(ld), mask).data)
        lp2 = lp.copy()
        lp2[mask == 1] += 1000.0
        assert float(masked_nll(t64(lp2), t64(ld), mask).data) == pytest.approx(base, abs=1e-12)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(2)
        lp = Parameter(rng.normal(0, 1, (1, 3, 3)), dtype=np.float64)
        ld = Parameter(rng.normal(0, 1, (1, 3, 3)), dtype=np.float64)
        mask = (rng.random((1, 3, 3)) < 0.4).astype(np.float64)
        mask.reshape(-1)[0] = 0

        def loss():
            return masked_nll(lp, ld, mask)

        with Tape() as tape:
            tape.backward(loss())
        for p in (lp, ld):
            assert rel_err(p.grad, fd_gradient(lambda: float(loss().data), p.data)) < 1e-3


class TestOutlierMin:
    def test_no_outliers_gives_zero(self):
        out = outlier_likelihood_min(t64(np.ones((1, 2, 2))), t64(np.zeros((1, 2, 2))), np.zeros((1, 2, 2)))
        assert float(out.data) == 0.0

    def test_single_outlier_pixel(self):
        lp = np.zeros((1, 2, 2))
        lp[0, 0, 0] = -1.0
        mask = np.zeros((1, 2, 2))
        mask[0, 0, 0] = 1
        out = outlier_likelihood_min(t64(lp), t64(np.zeros((1, 2, 2))), mask)
        assert abs(float(out.data) - (-1.0)) < 1e-12

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        lp = rng.normal(0, 1, (2, 3, 4))
        ld = rng.normal(0, 1, (2, 3, 4))
        mask = (rng.random((2, 3, 4)) < 0.5).astype(np.float64)
        mask.reshape(-1)[0] = 1
        expected = loop_masked_mean(lp + ld, mask, select=1, sign=1.0)
        assert abs(float(outlier_likelihood_min(t64(lp), t64(ld), mask).data) - expected) < 1e-9


class TestContrastiveClosedForms:
    def test_symmetric_case_log2(self):
        # one anchor, one positive, one negative with equal dot products
        for tau in (0.05, 0.1, 1.0):
            a = t64([[1.0, 0.0]])
            cands = t64([[0.0, 1.0], [0.0, 1.0]])  # both orthogonal to anchor
            out = contrastive_pairs_loss(a, [0], cands, [0, 1], tau)
            assert abs(float(out.data) - math.log(2.0)) < 1e-9

    def test_separated_case_tau_point1(self):
        a = t64([[1.0, 0.0]])
        cands = t64([[1.0, 0.0], [-1.0, 0.0]])
        out = contrastive_pairs_loss(a, [0], cands, [0, 1], tau=0.1)
        expected = math.log(1.0 + math.exp(-20.0))
        assert abs(float(out.data) - expected) < 1e-9

    def test_random_instances_match_direct_formula(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            n_c = int(rng.integers(4, 9))
            d = int(rng.integers(3, 6))
            cands = unit_rows(rng, n_c, d)
            c_lab = rng.integers(0, 2, n_c)
            c_lab[:2] = [0, 1]
            anchors = unit_rows(rng, 3, d)
            a_lab = rng.integers(0, 2, 3)
            got = float(contrastive_pairs_loss(t64(anchors), a_lab, t64(cands), c_lab, tau=0.10).data)
            expected = direct_contrastive(anchors, a_lab, cands, c_lab, 0.10)
            assert abs(got - expected) < 1e-6 * max(1.0, abs(expected))

    def test_six_vectors_two_classes(self):
        rng = np.random.default_rng(5)
        vecs = unit_rows(rng, 6, 4)
        labs = np.array([0, 0, 0, 1, 1, 1])
        got = float(
            contrastive_pairs_loss(t64(vecs), labs, t64(vecs), labs, tau=0.10, anchor_rows=np.arange(6)).data
        )
        expected = direct_contrastive(vecs, labs, vecs, labs, 0.10, anchor_rows=np.arange(6))
        assert abs(got - expected) < 1e-6 * max(1.0, abs(expected))


class TestContrastiveProperties:
    def test_rotation_invariance(self):
        rng = np.random.default_rng(6)
        anchors = unit_rows(rng, 4, 5)
        cands = unit_rows(rng, 7, 5)
        a_lab = rng.integers(0, 2, 4)
        c_lab = np.array([0, 1, 0, 1, 0, 1, 0])
        q, _ = np.linalg.qr(rng.normal(0, 1, (5, 5)))
        base = float(contrastive_pairs_loss(t64(anchors), a_lab, t64(cands), c_lab, 0.1).data)
        rot = float(contrastive_pairs_loss(t64(anchors @ q), a_lab, t64(cands @ q), c_lab, 0.1).data)
        assert abs(base - rot) < 1e-9

    def test_strictly_decreases_as_positive_dot_grows(self):
        losses = []
        for dot in (-0.5, 0.0, 0.5, 0.9):
            a = t64([[1.0, 0.0]])
            pos = np.array([dot, math.sqrt(1 - dot * dot)])
            cands = t64(np.stack([pos, [-1.0, 0.0]]))
            losses.append(float(contrastive_pairs_loss(a, [0], cands, [0, 1], 0.1).data))
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_anchor_without_positive_skipped(self):
        a = t64([[1.0, 0.0], [0.0, 1.0]])
        cands = t64([[1.0, 0.0], [-1.0, 0.0]])
        # anchor 1 has label 2: no positives in pool -> skipped
        out = contrastive_pairs_loss(a, [0, 2], cands, [0, 1], 0.1)
        expected = math.log(1.0 + math.exp(-20.0))
        assert abs(float(out.data) - expected) < 1e-9

    def test_all_anchors_skipped_rejected(self):
        a = t64([[1.0, 0.0]])
        cands = t64([[0.0, 1.0]])
        with pytest.raises(DegenerateBatchError):
            contrastive_pairs_loss(a, [0], cands, [0], 0.1)

    def test_non_unit_vectors_rejected(self):
        a = t64([[2.0, 0.0]])
        cands = t64([[1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(ValueError, match="normalized"):
            contrastive_pairs_loss(a, [0], cands, [0, 1], 0.1)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(7)
        raw_a = Parameter(rng.normal(0, 1, (3, 4)), dtype=np.float64)
        raw_c = Parameter(rng.normal(0, 1, (5, 4)), dtype=np.float64)
        a_lab = np.array([0, 1, 0])
        c_lab = np.array([0, 1, 0, 1, 1])

        def loss():
            return contrastive_pairs_loss(
                l2_normalize_channelwise(raw_a), a_lab, l2_normalize_channelwise(raw_c), c_lab, 0.1
            )

        with Tape() as tape:
            tape.backward(loss())
        for p in (raw_a, raw_c):
            assert rel_err(p.grad, fd_gradient(lambda: float(loss().data), p.data)) < 1e-3


class TestSupervisedContrastiveWrapper:
    def test_pool_includes_b_sets(self):
        rng = np.random.default_rng(8)
        n, d = 3, 4
        sets = AnchorSets(
            a_in=t64(unit_rows(rng, n, d)),
            a_ood=t64(unit_rows(rng, n, d)),
            b_ood=t64(unit_rows(rng, n, d)),
            b_in=None,
            coords={},
        )
        got = float(supervised_contrastive(sets, tau=0.1).data)
        pool = np.concatenate([sets.a_in.data, sets.a_ood.data, sets.b_ood.data])
        labels = np.array([0] * n + [1] * n + [1] * n)
        expected = direct_contrastive(pool[: 2 * n], labels[: 2 * n], pool, labels, 0.1, anchor_rows=np.arange(2 * n))
        assert abs(got - expected) < 1e-9

    def test_natural_image_mode_adds_b_in(self):
        rng = np.random.default_rng(9)
        n, d = 2, 4
        sets = AnchorSets(
            a_in=t64(unit_rows(rng, n, d)),
            a_ood=t64(unit_rows(rng, n, d)),
            b_ood=t64(unit_rows(rng, n, d)),
            b_in=t64(unit_rows(rng, n, d)),
            coords={},
        )
        got = float(supervised_contrastive(sets, tau=0.1).data)
        pool = np.concatenate([sets.a_in.data, sets.a_ood.data, sets.b_ood.data, sets.b_in.data])
        labels = np.array([0] * n + [1] * n + [1] * n + [0] * n)
        expected = direct_contrastive(pool[: 2 * n], labels[: 2 * n], pool, labels, 0.1, anchor_rows=np.arange(2 * n))
        assert abs(got - expected) < 1e-9


class TestTotalLoss:
    def test_contrastive_combination(self):
        out = total_loss(t64(2.0), t64(0.5), None, alpha=1.0, variant="contrastive")
        assert float(out.data) == pytest.approx(2.5)

    def test_alpha_zero(self):
        out = total_loss(t64(123.0), t64(0.7), None, alpha=0.0, variant="contrastive")
        assert float(out.data) == pytest.approx(0.7)

    def test_ml_only(self):
        out = total_loss(t64(0.918939), None, None, alpha=1.0, variant="ml_only")
        assert float(out.data) == pytest.approx(0.918939)

    def test_min_variant(self):
        out = total_loss(t64(1.0), None, t64(-2.0), alpha=0.5, variant="min")
        assert float(out.data) == pytest.approx(-1.5)

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError, match="variant"):
            total_loss(t64(1.0), None, None, 1.0, "bogus")
