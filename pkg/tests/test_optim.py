import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from persona_ar.optim import (
    AdamW, LRFinderDiverged, NonFiniteGradient, ReduceLROnPlateau, adamw_step, clip_global_norm, exponential_lrs,
    global_norm, lr_range_test, plateau_step,
)
from persona_ar.tensor import Tensor


def scalar(value, grad):
    p = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
    p.grad = np.array(grad, dtype=np.float64)
    return p


class TestAdamW:
    def test_hand_computed_first_step(self):
        p = scalar(1.0, 1.0)
        adamw_step([p], AdamW([p], lr=0.1, weight_decay=0.0))
        assert abs(float(p.data) - (1 - 0.1 * 1 / (1 + 1e-8))) <= 1e-9
        assert abs(float(p.data) - 0.9) <= 1e-8

    def test_decoupled_decay(self):
        p = scalar(1.0, 0.0)
        AdamW([p], lr=0.1, weight_decay=0.05).step()
        assert float(p.data) == pytest.approx(0.995, abs=1e-12)

    def test_zero_grad_fixed_point(self):
        p = Tensor(np.arange(5.0), requires_grad=True)
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        for _ in range(3):
            opt.step()
        np.testing.assert_array_equal(p.data, np.arange(5.0))

    def test_second_step_matches_reference(self):
        # independent re-derivation of two bias-corrected steps
        p = scalar(0.5, 0.0)
        opt = AdamW([p], lr=0.01, weight_decay=0.05)
        grads = [0.3, -0.7]
        ref, m, v = 0.5, 0.0, 0.0
        for t, g in enumerate(grads, 1):
            p.grad = np.array(g)
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 0.01 * ((m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8) + 0.05 * ref)
        assert abs(float(p.data) - ref) <= 1e-12
        assert opt.step_count == 2

    def test_non_finite_refused(self):
        p = scalar(1.0, np.nan)
        opt = AdamW([p])
        with pytest.raises(NonFiniteGradient):
            opt.step()
        assert float(p.data) == 1.0 and opt.step_count == 0

    def test_parameter_order_irrelevant(self):
        rng = np.random.default_rng(0)
        vals = [rng.normal(size=3) for _ in range(3)]
        grads = [rng.normal(size=3) for _ in range(3)]

        def run(order):
            ps = [Tensor(vals[i].copy(), requires_grad=True) for i in order]
            for p, i in zip(ps, order):
                p.grad = grads[i].copy()
            AdamW(ps).step()
            return {i: p.data for p, i in zip(ps, order)}

        a, b = run([0, 1, 2]), run([2, 0, 1])
        for i in range(3):
            assert a[i].tobytes() == b[i].tobytes()


class TestClip:
    def test_halves_when_norm_two(self):
        p = scalar([0.0, 0.0], [1.2, 1.6])
        assert clip_global_norm([p], 1.0) == pytest.approx(2.0)
        np.testing.assert_allclose(p.grad, [0.6, 0.8])

    def test_small_norm_unchanged(self):
        p = scalar([0.0], [0.5])
        clip_global_norm([p], 1.0)
        assert p.grad.tolist() == [0.5]

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(0.1, 5))
    def test_post_clip_norm(self, values, threshold):
        p = scalar(np.zeros(len(values)), values)
        q = scalar(np.zeros(2), [values[0], -values[-1]])
        before = [np.abs(x.grad).copy() for x in (p, q)]
        n = clip_global_norm([p, q], threshold)
        assert abs(global_norm([p.grad, q.grad]) - min(n, threshold)) <= 1e-6
        for x, b in zip((p, q), before):
            assert np.all(np.abs(x.grad) <= b + 1e-15)

    def test_threshold_must_be_positive(self):
        with pytest.raises(ValueError):
            clip_global_norm([scalar(0.0, 1.0)], 0.0)


class TestPlateau:
    def test_reduces_after_sixty_bad_calls(self):
        s = ReduceLROnPlateau(2e-3)
        lrs = [plateau_step(s, 1.0) for _ in range(61)]
        assert lrs[59] == 2e-3 and lrs[60] == 1e-3

    def test_sequence_clamps(self):
        s = ReduceLROnPlateau(2e-3)
        lrs = [s.step(1.0) for _ in range(1 + 60 * 6)]
        cuts = sorted(set(lrs), reverse=True)
        assert cuts == pytest.approx([2e-3, 1e-3, 5e-4, 2.5e-4, 1.5e-4])
        assert lrs[-1] == 1.5e-4

    def test_improvement_never_reduces(self):
        s = ReduceLROnPlateau(2e-3)
        assert {s.step(1.0 / k) for k in range(1, 500)} == {2e-3}

    def test_improvement_resets_counter(self):
        s = ReduceLROnPlateau(2e-3)
        for _ in range(50):
            s.step(1.0)
        s.step(0.5)
        assert s.bad_steps == 0
        assert all(s.step(0.5) == 2e-3 for _ in range(59))

    def test_non_finite_metric(self):
        with pytest.raises(ValueError):
            ReduceLROnPlateau(1e-3).step(float("nan"))


def quadratic():
    target = np.array([3.0, -2.0, 1.0, 0.5])
    p = Tensor(np.zeros(4), requires_grad=True)
    diff = lambda: p + Tensor(-target)
    return [p], lambda _: (diff() * diff()).sum()


class TestLRFinder:
    def test_schedule(self):
        lrs = exponential_lrs(1e-7, 1.0, 100)
        k = np.arange(100)
        np.testing.assert_allclose(lrs, 1e-7 * (1e7) ** (k / 99), rtol=1e-12)

    def test_quadratic_suggestion_below_divergence(self):
        curve = lr_range_test(quadratic, itertools.repeat(None), 1e-4, 100.0, 100, clip=None)
        assert curve.diverged_at is not None
        assert curve.suggestion < curve.diverged_at
        assert curve.suggestion == pytest.approx(curve.lrs[int(np.argmin(curve.losses))] / 10)
        assert curve.lrs[0] <= curve.steepest <= curve.lrs[-1]
        assert len(curve.to_text().splitlines()) == len(curve.lrs)

    def test_constant_loss_picks_first_index(self):
        def build():
            p = Tensor(np.zeros(1), requires_grad=True)
            return [p], lambda _: (p * 0.0).sum() + Tensor(1.0)
        curve = lr_range_test(build, itertools.repeat(None), 1e-5, 1e-1, 20)
        assert curve.suggestion == 1e-5  # lr_min / 10 clamped up to lr_min

    def test_immediate_divergence(self):
        calls = iter([1.0, 100.0])

        def build():
            p = Tensor(np.zeros(1), requires_grad=True)
            return [p], lambda _: (p * 0.0).sum() + Tensor(next(calls))
        with pytest.raises(LRFinderDiverged) as err:
            lr_range_test(build, itertools.repeat(None), 1e-5, 1e-1, 20)
        assert err.value.curve.lrs == [1e-5]

    @pytest.mark.parametrize("kw", [dict(lr_min=1.0, lr_max=0.1), dict(steps=5)])
    def test_preconditions(self, kw):
        args = dict(lr_min=1e-5, lr_max=1.0, steps=20) | kw
        with pytest.raises(ValueError):
            lr_range_test(quadratic, itertools.repeat(None), **args)
