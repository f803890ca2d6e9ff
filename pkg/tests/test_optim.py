import numpy as np
import pytest

from mif.errors import NonFiniteError
from mif.optim import OptConfig, OptState, adamw_step


def reference_adamw(p, grads, lr, b1, b2, eps, wd):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p * (1 - lr * wd)
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


class TestAdamW:
    def test_defaults(self):
        c = OptConfig()
        assert (c.lr, c.beta1, c.beta2, c.eps, c.weight_decay, c.milestones, c.decay) == \
            (0.01, 0.9, 0.999, 1e-15, 1e-7, (10_000, 50_000), 0.1)

    def test_zero_grads_no_decay(self, rng):
        p = rng.normal(size=(4, 3))
        before = p.copy()
        st = OptState.for_params([p], OptConfig(weight_decay=0.0))
        for it in range(1, 6):
            adamw_step(st, [p], [np.zeros_like(p)], it)
        np.testing.assert_array_equal(p, before)

    def test_first_step(self):
        p = np.array([1.0])
        st = OptState.for_params([p], OptConfig(lr=0.01, eps=1e-15, weight_decay=0.0))
        adamw_step(st, [p], [np.array([1.0])], 1)
        assert p[0] == pytest.approx(0.99, abs=1e-12)

    def test_decoupled_decay(self):
        p, q = np.array([1.0]), np.array([1.0])
        sa = OptState.for_params([p], OptConfig(weight_decay=1e-7))
        sb = OptState.for_params([q], OptConfig(weight_decay=0.0))
        adamw_step(sa, [p], [np.array([0.0])], 1)
        adamw_step(sb, [q], [np.array([0.0])], 1)
        assert p[0] == pytest.approx(q[0] * (1 - 0.01 * 1e-7), abs=1e-17)
        assert p[0] == 1.0 - 1e-9

    def test_matches_reference_sequence(self, rng):
        grads = rng.normal(size=30)
        p = np.array([0.4])
        st = OptState.for_params([p], OptConfig(weight_decay=1e-3))
        for it, g in enumerate(grads, start=1):
            adamw_step(st, [p], [np.array([g])], it)
        assert p[0] == pytest.approx(reference_adamw(0.4, grads, 0.01, 0.9, 0.999, 1e-15, 1e-3), rel=1e-12)

    def test_lr_schedule(self):
        c = OptConfig()
        assert c.lr_at(1) == 0.01
        assert c.lr_at(10_000) == 0.01
        assert c.lr_at(10_001) == pytest.approx(0.001)
        assert c.lr_at(50_001) == pytest.approx(0.0001)

    def test_sparse_rows_untouched(self, rng):
        p = rng.normal(size=(5, 2))
        before = p.copy()
        st = OptState.for_params([p])
        adamw_step(st, [p], [np.ones_like(p)], 1, rows=[np.array([1, 3])])
        np.testing.assert_array_equal(p[[0, 2, 4]], before[[0, 2, 4]])
        assert np.all(p[[1, 3]] < before[[1, 3]])
        assert np.all(st.m[0][[0, 2, 4]] == 0)

    def test_non_finite_gradient(self):
        p = np.zeros(2)
        st = OptState.for_params([p])
        with pytest.raises(NonFiniteError) as e:
            adamw_step(st, [p], [np.array([np.nan, 0.0])], 7)
        assert e.value.iteration == 7

    def test_iteration_positive(self):
        p = np.zeros(1)
        with pytest.raises(ValueError):
            adamw_step(OptState.for_params([p]), [p], [np.zeros(1)], 0)

    def test_serialization(self, rng):
        params = [rng.normal(size=(3, 2)), rng.normal(size=4)]
        st = OptState.for_params(params, OptConfig(lr=0.02, milestones=(5, 9)))
        adamw_step(st, params, [rng.normal(size=(3, 2)), rng.normal(size=4)], 1)
        back = OptState.from_bytes(st.to_bytes())
        assert back.cfg == st.cfg and back.step == st.step
        for a, b in zip(back.m + back.v, st.m + st.v):
            np.testing.assert_array_equal(a, b)
