import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mif.autodiff import Tensor
from mif.errors import ConfigError, EmptyInputError, NonFiniteError
from mif.losses import LossWeights, loss_eikonal, loss_mono, loss_sign, loss_surface, total_loss
from tests.conftest import loss_gradient_check

TANH5_SQ = np.tanh(5.0) ** 2


def grad_of(fn, x):
    t = Tensor(np.asarray(x, dtype=float), requires_grad=True)
    fn(t).backward()
    return t.grad


def fd(fn, x, h=1e-7):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (float(fn(xp)) - float(fn(xm))) / (2 * h)
    return out


class TestSurface:
    def test_zeros(self):
        assert float(loss_surface([0.0, 0.0, 0.0])) == 0.0

    def test_mean_abs(self):
        assert float(loss_surface([1.0, -1.0])) == 1.0

    def test_gradient_sign_over_n(self):
        x = np.array([0.3, -0.2, 0.5, -1.0])
        g = grad_of(loss_surface, x)
        np.testing.assert_array_equal(g, np.sign(x) / 4)
        np.testing.assert_allclose(g, fd(loss_surface, x), atol=1e-8)

    def test_subgradient_zero_at_zero(self):
        assert grad_of(loss_surface, [0.0, 1.0])[0] == 0.0

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            loss_surface([])


class TestSign:
    def test_matching_signs(self):
        assert float(loss_sign([0.05], [0.05], 100)) == pytest.approx(1 - TANH5_SQ, rel=1e-12)
        assert float(loss_sign([0.05], [0.05], 100)) == pytest.approx(1.815e-4, rel=1e-3)

    @settings(max_examples=50)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=10))
    def test_zero_field_is_one(self, r):
        assert float(loss_sign(np.zeros(len(r)), r, 100)) == 1.0

    def test_mismatch(self):
        assert float(loss_sign([0.05], [-0.05], 100)) == pytest.approx(1 + TANH5_SQ, rel=1e-12)
        assert float(loss_sign([0.05], [-0.05], 100)) == pytest.approx(2 - 1.815e-4, abs=1e-7)

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=1, max_size=10))
    def test_range_and_joint_negation(self, pairs):
        f, r = np.array(pairs).T
        v = float(loss_sign(f, r, 100))
        assert 0.0 <= v <= 2.0
        assert float(loss_sign(-f, -r, 100)) == pytest.approx(v, abs=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            loss_sign([0.1, 0.2], [0.1], 100)

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            loss_sign([], [], 100)


class TestMono:
    def test_saturated_monotone(self):
        v = float(loss_mono([[1.0, 0.0, -1.0]], 100))
        assert v == pytest.approx(1 - np.tanh(100.0), abs=1e-12)
        assert v == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("alpha", [0.5, 100.0, 1e4])
    def test_flat_is_one(self, alpha):
        assert float(loss_mono([[0.0, 0.0]], alpha)) == 1.0

    def test_violation_saturates(self):
        assert float(loss_mono([[-1.0, 1.0]], 100)) == pytest.approx(2.0, abs=1e-12)

    def test_two_level_mean(self):
        # ray A has 2 pairs, ray B has 1: per-ray means first, then across rays
        a, b = [0.0, 0.0, 0.0], [-1.0, 1.0]
        expect = 0.5 * (1.0 + (1.0 - np.tanh(-200.0)))
        assert float(loss_mono([a, b], 100)) == pytest.approx(expect, abs=1e-12)

    def test_short_rays_skipped(self):
        assert float(loss_mono([[0.5], [0.0, 0.0]], 100)) == 1.0
        with pytest.raises(EmptyInputError):
            loss_mono([[0.5], [1.0]], 100)
        with pytest.raises(EmptyInputError):
            loss_mono(np.zeros((3, 1)), 100)

    @settings(max_examples=50)
    @given(st.lists(st.floats(-0.05, 0.05), min_size=2, max_size=8), st.floats(-10, 10))
    def test_shift_invariant_and_bounded(self, vals, c):
        v = np.array([vals])
        a = float(loss_mono(v, 100))
        assert 0.0 < a < 2.0
        assert float(loss_mono(v + c, 100)) == pytest.approx(a, abs=1e-9)

    def test_strictly_decreasing_in_each_delta(self):
        base = np.array([[0.02, 0.01, 0.0]])
        g = grad_of(lambda t: loss_mono(t, 100), base)
        # increasing f_m (larger delta_m) lowers the loss
        assert g[0, 0] < 0
        np.testing.assert_allclose(g, fd(lambda x: loss_mono(x, 100), base), rtol=1e-6)


class TestEikonal:
    def test_unit_vectors(self, rng):
        g = rng.normal(size=(20, 3))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        assert float(loss_eikonal(g)) == pytest.approx(0.0, abs=1e-15)

    def test_zero_gradient(self):
        assert float(loss_eikonal([[0.0, 0.0, 0.0]])) == 1.0

    def test_double_norm(self):
        assert float(loss_eikonal([[2.0, 0.0, 0.0]])) == 1.0

    def test_fd(self, rng):
        g = rng.normal(size=(5, 3))
        np.testing.assert_allclose(grad_of(loss_eikonal, g), fd(loss_eikonal, g), rtol=1e-6)

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            loss_eikonal(np.zeros((0, 3)))


class TestTotal:
    def test_weighted_sum(self):
        parts = {"surf": 1.0, "eik": 1.0, "sign": 1.0, "mono": 1.0}
        w = LossWeights(lambda_eik=0.1, lambda_sign=1.0, lambda_mono=1.0)
        assert float(total_loss(parts, w)) == pytest.approx(3.1, abs=1e-15)

    def test_zero_weights_leave_surface(self):
        parts = {"surf": 0.7, "eik": 5.0, "sign": 3.0, "mono": 2.0}
        w = LossWeights(lambda_eik=0.0, lambda_sign=0.0, lambda_mono=0.0)
        assert float(total_loss(parts, w)) == 0.7

    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda_eik, w.lambda_sign, w.lambda_mono, w.lambda_surf) == (0.1, 1.0, 1.0, 1.0)

    def test_negative_weight(self):
        with pytest.raises(ConfigError):
            LossWeights(lambda_sign=-1.0)

    def test_non_finite(self):
        with pytest.raises(NonFiniteError):
            total_loss({"surf": float("nan")}, LossWeights())

    def test_gradient_is_weighted_sum(self, rng):
        f = rng.normal(scale=0.02, size=(3, 4))
        r = rng.normal(scale=0.05, size=12)
        g = rng.normal(size=(3, 3))
        w = LossWeights(lambda_eik=0.3, lambda_sign=0.7, lambda_mono=1.3)

        def parts(ft, gt):
            return {"surf": loss_surface(ft[0]), "sign": loss_sign(ft.reshape(-1), r, 100),
                    "mono": loss_mono(ft, 100), "eik": loss_eikonal(gt)}

        ft, gt = Tensor(f, requires_grad=True), Tensor(g, requires_grad=True)
        total_loss(parts(ft, gt), w).backward()
        acc_f, acc_g = 0.0, 0.0
        for name, coef in (("surf", 1.0), ("sign", 0.7), ("mono", 1.3), ("eik", 0.3)):
            ft2, gt2 = Tensor(f, requires_grad=True), Tensor(g, requires_grad=True)
            parts(ft2, gt2)[name].backward()
            acc_f = acc_f + coef * (ft2.grad if ft2.grad is not None else 0.0)
            acc_g = acc_g + coef * (gt2.grad if gt2.grad is not None else 0.0)
        np.testing.assert_allclose(ft.grad, acc_f, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(gt.grad, acc_g, rtol=1e-12, atol=1e-15)
        numeric = fd(lambda x: total_loss(parts(Tensor(x), Tensor(g)), w), f, h=1e-7)
        np.testing.assert_allclose(ft.grad, numeric, rtol=1e-5, atol=1e-7)


class TestFullGradient:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_two_ray_micro_problem(self, seed):
        failures, checked, skipped = loss_gradient_check(seed)
        assert not failures, failures[:5]
        assert checked > 50 and skipped <= checked // 10
