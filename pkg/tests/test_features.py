import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vitalgate.features import (
    WindowSpec,
    ewma,
    feature_names,
    first_difference,
    line_fit,
    pulse_pressure,
    window_features,
)
from vitalgate.timeseries import ChannelKind

ABP = [ChannelKind.SysABP, ChannelKind.DiaABP]


class TestLineFit:
    def test_exact_line(self):
        np.testing.assert_allclose(line_fit([1, 2, 3, 4]), (1.0, 1.0))

    def test_constant(self):
        np.testing.assert_allclose(line_fit([5, 5, 5]), (0.0, 5.0), atol=1e-15)

    def test_four_point_closed_form(self):
        # x = 0..3, y = [0,1,1,2]: Sxy = 3, Sxx = 5 -> slope 0.6, intercept 1 - 0.6*1.5
        slope, icpt = line_fit([0, 1, 1, 2])
        np.testing.assert_allclose((slope, icpt), (0.6, 0.1), atol=1e-14)

    def test_too_short(self):
        with pytest.raises(ValueError):
            line_fit([1.0])

    @given(arrays(np.float64, st.integers(2, 60), elements=st.floats(-1e3, 1e3)))
    def test_residual_orthogonal(self, y):
        slope, icpt = line_fit(y)
        x = np.arange(len(y))
        res = y - (icpt + slope * x)
        scale = max(1.0, np.abs(y).max()) * len(y) ** 2
        assert abs(res.sum()) < 1e-10 * scale
        assert abs(res @ x) < 1e-10 * scale


class TestPrimitives:
    def test_ewma_examples(self):
        np.testing.assert_allclose(ewma([0, 1, 1], 0.5), [0, 0.5, 0.75])
        x = np.array([3.0, -1.0, 2.0])
        np.testing.assert_array_equal(ewma(x, 1.0), x)
        np.testing.assert_allclose(ewma(np.full(6, 2.5), 0.3), 2.5)

    @pytest.mark.parametrize("alpha", [0.0, -0.1, 1.5])
    def test_ewma_alpha_range(self, alpha):
        with pytest.raises(ValueError):
            ewma([1.0, 2.0], alpha)

    def test_pulse_pressure(self):
        np.testing.assert_array_equal(pulse_pressure([120, 118], [80, 79]), [40, 39])
        with pytest.raises(ValueError):
            pulse_pressure([1, 2], [1])

    def test_first_difference(self):
        np.testing.assert_array_equal(first_difference([1, 3, 6]), [0, 2, 3])
        np.testing.assert_array_equal(first_difference([0, -1]), [0, -1])
        np.testing.assert_array_equal(first_difference(np.full(4, 7.0)), 0)


class TestWindowFeatures:
    def test_linear_channel_past_slope(self):
        x = {ChannelKind.HR: np.arange(20, dtype=float)}
        f = window_features(x, 10, WindowSpec(4, 0))
        assert f[0] == pytest.approx(1.0)
        assert len(f) == 4  # no future fit when r < 2

    def test_future_pair_only_when_r_ge_2(self):
        assert len(feature_names(ABP, WindowSpec(4, 1))) == 2 * 4 + 1
        assert len(feature_names(ABP, WindowSpec(4, 2))) == 2 * 6 + 1

    def test_hand_window(self):
        rng = np.random.default_rng(0)
        sys, dia = rng.normal(size=10), rng.normal(size=10)
        spec, t = WindowSpec(5, 3), 6
        got = window_features({ChannelKind.SysABP: sys, ChannelKind.DiaABP: dia}, t, spec, 0.3)
        want = []
        for x in (sys, dia):
            want += list(line_fit(x[1:7])) + list(line_fit(x[7:10]))
            want += [ewma(x[1:7], 0.3)[-1], first_difference(x)[t]]
        want.append(pulse_pressure(sys, dia)[t])
        np.testing.assert_allclose(got, want, rtol=1e-14)

    def test_out_of_range(self):
        x = {ChannelKind.HR: np.zeros(10)}
        with pytest.raises(IndexError):
            window_features(x, 3, WindowSpec(4, 0))
        with pytest.raises(IndexError):
            window_features(x, 8, WindowSpec(4, 2))

    def test_translation_equivariance(self):
        rng = np.random.default_rng(1)
        x = np.tile(rng.normal(size=7), 8)  # periodic, period 7
        spec = WindowSpec(6, 3)
        a = window_features({ChannelKind.HR: x}, 10, spec)
        b = window_features({ChannelKind.HR: x}, 17, spec)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_spec_bounds(self):
        for l, r in [(3, 0), (50, 0), (4, -1), (4, 11)]:
            with pytest.raises(ValueError):
                WindowSpec(l, r)
