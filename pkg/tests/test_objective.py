import math

import numpy as np
import pytest
import scipy.special as sps
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate, stats

from priornet.numerics import finite_difference_gradient, relative_error
from priornet.objective import (
    DirichletParams,
    LossHyperParams,
    ce_term,
    combined_loss,
    dirichlet_kl_to_uniform,
    evidence_and_alpha,
    evidential_data_term,
    gradient_check,
    henn_loss,
    loss_gradient,
    ufce_term,
    uncertainty_weight,
)


def _params(alpha):
    a = np.asarray(alpha, dtype=float)
    return DirichletParams(evidence=a - 1.0, alpha=a, alpha0=a.sum(axis=-1))


def reference_loss(z, y, lam, w_ufce, w_ce, eps=1e-8, cap=5.0, w_henn=1.0):
    """Scalar pure-Python loss built on scipy special functions."""
    e = [min(max(math.log1p(math.exp(-abs(v))) + max(v, 0.0), 0.0), cap) for v in z]
    a = [v + 1.0 for v in e]
    a0 = sum(a)
    C = len(z)
    data = sps.digamma(a0) - sps.digamma(a[y])
    kl = (sps.gammaln(a0) - sum(sps.gammaln(v) for v in a) - sps.gammaln(C)
          + sum((v - 1) * (sps.digamma(v) - sps.digamma(a0)) for v in a))
    m = max(z)
    ex = [math.exp(v - m) for v in z]
    p_y = ex[y] / sum(ex)
    u = 1.0 / (1.0 + sum(e))
    ufce = -w_ufce * u * (1 - p_y) ** u * math.log(p_y + eps)
    ce = -math.log(p_y + eps)
    return w_henn * (data + lam * kl) + ufce + w_ce * ce


class TestEvidence:
    def test_zero_logits(self):
        p = evidence_and_alpha(np.zeros(4))
        np.testing.assert_allclose(p.evidence, math.log(2), atol=1e-12)
        assert p.alpha0 == pytest.approx(4 + 4 * math.log(2), abs=1e-12)

    def test_saturation(self):
        p = evidence_and_alpha(np.array([10.0, -10.0, -10.0, -10.0]))
        assert p.alpha[0] == 6.0
        np.testing.assert_allclose(p.alpha[1:], 1 + math.log1p(math.exp(-10)), rtol=1e-12)
        assert p.alpha0 == pytest.approx(9.000136, abs=1e-6)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(2, 10), elements=st.floats(-1e4, 1e4)))
    def test_bounds(self, z):
        p = evidence_and_alpha(z)
        assert np.all(p.alpha >= 1.0) and np.all(p.alpha <= 6.0)
        C = len(z)
        assert C <= p.alpha0 <= 6 * C
        u = uncertainty_weight(p)
        assert 1 / (1 + 5 * C) - 1e-15 <= u <= 1.0


class TestDataTerm:
    def test_hand_value(self):
        # psi(5) - psi(2) = 1/2 + 1/3 + 1/4
        assert evidential_data_term(_params([2, 1, 1, 1]), 0) == pytest.approx(13 / 12, abs=1e-10)

    def test_positive(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(1, 6, size=(500, 5))
        y = rng.integers(0, 5, size=500)
        assert np.all(evidential_data_term(_params(a), y) > 0)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            evidential_data_term(_params([1, 1]), 2)


class TestKL:
    def test_uniform_is_zero(self):
        for C in (2, 4, 7):
            assert abs(dirichlet_kl_to_uniform(_params(np.ones(C)))) < 1e-12

    def test_hand_value(self):
        expected = math.log(4) - 13 / 12
        assert dirichlet_kl_to_uniform(_params([2, 1, 1, 1])) == pytest.approx(expected, abs=1e-10)
        assert expected == pytest.approx(0.302961, abs=1e-6)

    def test_against_beta_quadrature(self):
        rng = np.random.default_rng(11)
        for a, b in rng.uniform(1, 6, size=(20, 2)):
            dist = stats.beta(a, b)
            ref, _ = integrate.quad(lambda t: dist.pdf(t) * dist.logpdf(t), 0, 1, limit=200)
            assert abs(dirichlet_kl_to_uniform(_params([a, b])) - ref) < 1e-4

    def test_nonnegative(self):
        a = np.random.default_rng(1).uniform(1, 6, size=(1000, 6))
        assert np.all(dirichlet_kl_to_uniform(_params(a)) >= -1e-12)

    def test_henn_combines(self):
        p = _params([2, 1, 1, 1])
        assert henn_loss(p, 0, 0.5) == pytest.approx(13 / 12 + 0.5 * (math.log(4) - 13 / 12))


class TestUfceAndCe:
    def test_ufce_at_zero_logits(self):
        u = 1 / (1 + 4 * math.log(2))
        expected = -u * 0.75 ** u * math.log(0.25 + 1e-8)
        assert ufce_term(np.zeros(4), 0, LossHyperParams()) == pytest.approx(expected, abs=1e-12)
        assert u == pytest.approx(0.2650700, abs=1e-7)

    def test_ce_at_zero_logits(self):
        assert ce_term(np.zeros(4), 2) == pytest.approx(-math.log(0.25 + 1e-8), abs=1e-12)

    def test_ufce_zero_weight(self):
        assert ufce_term(np.array([1.0, -2.0]), 1, LossHyperParams(w_ufce=0.0)) == 0.0

    def test_ufce_confident_correct_is_small(self):
        assert ufce_term(np.array([40.0, -40.0]), 0, LossHyperParams()) < 1e-8


class TestCombined:
    def test_against_reference(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            C = int(rng.integers(2, 7))
            z = rng.uniform(-8, 8, size=C)
            y = int(rng.integers(0, C))
            lam, wu, wc = rng.uniform(0, 2, size=3)
            hyper = LossHyperParams(lambda_kl=lam, w_ufce=wu, w_ce=wc)
            got = combined_loss(z[None], [y], hyper).total
            assert got == pytest.approx(reference_loss(list(z), y, lam, wu, wc), abs=1e-10)

    def test_zero_logits_lambda(self):
        out = combined_loss(np.zeros((1, 4)), [0], LossHyperParams(lambda_kl=0.1))
        ref = reference_loss([0.0] * 4, 0, 0.1, 1.0, 1.0)
        assert out.total == pytest.approx(ref, abs=1e-12)

    def test_batch_is_mean(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(6, 3))
        y = rng.integers(0, 3, size=6)
        hyper = LossHyperParams()
        singles = [combined_loss(z[i:i + 1], y[i:i + 1], hyper).total for i in range(6)]
        assert combined_loss(z, y, hyper).total == pytest.approx(np.mean(singles), abs=1e-12)

    def test_cross_entropy_only(self):
        z = np.array([[0.3, -1.2, 2.0]])
        out = combined_loss(z, [1], LossHyperParams.cross_entropy_only())
        assert out.total == pytest.approx(float(ce_term(z[0], 1)), abs=1e-14)

    def test_lambda_override(self):
        z = np.array([[1.0, 0.0]])
        hyper = LossHyperParams(lambda_kl=0.0)
        a = combined_loss(z, [0], hyper, lambda_kl=0.7).total
        b = combined_loss(z, [0], LossHyperParams(lambda_kl=0.7)).total
        assert a == b

    def test_finite_on_extremes(self):
        z = np.array([[1e4, -1e4, 0.0], [-1e4, -1e4, -1e4]])
        out = combined_loss(z, [1, 2], LossHyperParams())
        assert np.isfinite(out.total)

    @pytest.mark.parametrize("bad", [np.zeros(3), np.zeros((0, 3))])
    def test_bad_shapes(self, bad):
        with pytest.raises(ValueError):
            combined_loss(bad, [], LossHyperParams())

    def test_label_count_mismatch(self):
        with pytest.raises(ValueError):
            combined_loss(np.zeros((2, 3)), [0], LossHyperParams())

    def test_kl_anneal(self):
        h = LossHyperParams(lambda_kl=0.2, kl_anneal_epochs=4)
        assert [h.kl_weight(e) for e in (0, 2, 4, 9)] == pytest.approx([0.0, 0.1, 0.2, 0.2])
        assert LossHyperParams(lambda_kl=0.2).kl_weight(0) == 0.2

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossHyperParams(w_ce=-1.0)


class TestGradient:
    def test_gradient_check_report(self):
        rep = gradient_check(trials=100, seed=0)
        assert rep.num_points_checked + rep.points_skipped_near_nonsmoothness == 100
        assert rep.num_points_checked >= 90
        assert rep.max_rel_error < 1e-5

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 2 ** 32 - 1))
    def test_matches_finite_differences(self, C, seed):
        rng = np.random.default_rng(seed)
        z = rng.uniform(-6, 6, size=(3, C))
        y = rng.integers(0, C, size=3)
        hyper = LossHyperParams(lambda_kl=float(rng.uniform(0, 1)))
        if np.any(np.abs(np.logaddexp(0, z) - hyper.evidence_cap) < 1e-3):
            return
        num = finite_difference_gradient(lambda v: combined_loss(v, y, hyper).total, z)
        _, rel = relative_error(loss_gradient(z, y, hyper), num)
        assert rel < 1e-5

    def test_plateau_has_no_evidence_gradient(self):
        # with only the evidence path active, capped logits get zero gradient
        hyper = LossHyperParams(lambda_kl=1.0, w_ufce=0.0, w_ce=0.0)
        g = loss_gradient(np.array([[20.0, 0.5, -1.0]]), [1], hyper)
        assert g[0, 0] == 0.0 and g[0, 1] != 0.0

    def test_ce_only_gradient_is_softmax_minus_onehot(self):
        z = np.array([[0.5, -0.3, 1.1]])
        g = loss_gradient(z, [2], LossHyperParams.cross_entropy_only(epsilon=0.0))
        p = np.exp(z) / np.exp(z).sum()
        np.testing.assert_allclose(g, p - np.array([[0, 0, 1]]), atol=1e-12)
