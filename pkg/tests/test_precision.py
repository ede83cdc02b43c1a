import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adasum.precision import MAX_SCALE, MIN_SCALE, ScaleState, check_and_update, scaled_cast


class TestScaledCast:
    def test_unit_scale(self):
        out = scaled_cast(np.array([1.0]), ScaleState(scale=1.0))
        assert out.dtype == np.float16 and out[0] == 1.0

    def test_overflow_to_inf(self):
        assert math.isinf(scaled_cast([4.0], ScaleState())[0])

    def test_power_of_two_scaling_exact(self):
        assert float(scaled_cast([2.0 ** -20], ScaleState())[0]) == 2.0 ** -5

    def test_scale_must_be_power_of_two(self):
        with pytest.raises(ValueError):
            ScaleState(scale=3.0)
        with pytest.raises(ValueError):
            ScaleState(growth_interval=0)


class TestCheckAndUpdate:
    def test_clean_result_unscales(self):
        s = ScaleState(scale=4.0)
        out = check_and_update(np.array([2.0, -8.0], dtype=np.float16), s)
        np.testing.assert_array_equal(out, [0.5, -2.0])
        assert out.dtype == np.float64 and s.accepted == 1

    def test_growth_after_interval(self):
        s = ScaleState(scale=8.0, growth_interval=3)
        for _ in range(3):
            check_and_update(np.ones(2), s)
        assert s.scale == 16.0 and s.good_steps == 0

    def test_overflow_rejects_and_halves(self):
        s = ScaleState(scale=8.0)
        assert check_and_update(np.array([1.0, np.inf]), s) is None
        assert s.scale == 4.0 and s.rejected == 1 and s.good_steps == 0

    def test_nan_rejects(self):
        assert check_and_update(np.array([np.nan]), ScaleState()) is None

    def test_alternating_never_grows(self):
        s = ScaleState(scale=2.0 ** 10, growth_interval=1)
        # growth_interval=1: each clean step doubles, each overflow halves.
        start = s.scale
        history = []
        for i in range(200):
            check_and_update(np.array([np.inf if i % 2 else 1.0]), s)
            history.append(s.scale)
        assert max(history) <= 2 * start and history[-1] == start
        s = ScaleState(scale=2.0 ** 10, growth_interval=2)
        for i in range(200):
            check_and_update(np.array([np.inf if i % 2 else 1.0]), s)
        assert s.scale == MIN_SCALE

    def test_accept_rate(self):
        s = ScaleState()
        assert s.accept_rate == 1.0
        check_and_update(np.ones(1), s)
        check_and_update(np.array([np.inf]), s)
        assert s.accept_rate == 0.5

    @given(st.lists(st.booleans(), min_size=1, max_size=10_000), st.integers(1, 50))
    def test_scale_stays_bounded(self, overflow, interval):
        s = ScaleState(growth_interval=interval)
        for bad in overflow:
            check_and_update(np.array([np.inf if bad else 0.5]), s)
            assert MIN_SCALE <= s.scale <= MAX_SCALE
            assert math.frexp(s.scale)[0] == 0.5


@pytest.mark.parametrize("p_overflow", [0.0, 0.001, 0.5, 1.0])
def test_ten_thousand_step_run_stays_in_range(p_overflow):
    rng = np.random.default_rng(0)
    s = ScaleState(growth_interval=20)
    for _ in range(10_000):
        check_and_update(np.array([np.inf if rng.random() < p_overflow else 1.0]), s)
        assert MIN_SCALE <= s.scale <= MAX_SCALE
