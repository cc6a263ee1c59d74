"""Surrogate-null test assembly: arithmetic, monotonicity, equivariance."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hoiflab.bias_test import surrogate_bias_test, z_upper
from hoiflab.errors import ConfigError, DegenerateTestError
from hoiflab.hoif import UStatResult


def u(est, se, order=2, kind="oracle_gram"):
    return UStatResult(est, se, order=order, kernel_kind=kind, n_used=max(order, 2))


def test_z_quantile_accuracy():
    assert z_upper(0.025) == pytest.approx(1.959963984540054, abs=1e-9)
    assert z_upper(0.05) == pytest.approx(1.6448536269514722, abs=1e-9)


class TestArithmetic:
    def test_zero_estimate_never_rejects(self):
        out = surrogate_bias_test(u(0.0, 0.2), u(1.0, 0.1, order=1), 0.05, 0.0)
        assert out.statistic <= 0.0
        assert not out.reject

    def test_worked_example(self):
        out = surrogate_bias_test(u(0.5, 0.0), u(1.0, 0.1, order=1), 0.05, 1.0)
        assert out.statistic == pytest.approx(5.0)
        assert out.reject

    def test_huge_delta_dominates(self):
        out = surrogate_bias_test(u(100.0, 0.1), u(1.0, 0.001, order=1), 0.05, 1e9)
        assert not out.reject

    def test_reject_iff_statistic_exceeds_delta(self):
        out = surrogate_bias_test(u(0.3, 0.05), u(1.0, 0.1, order=1), 0.05, 0.2)
        assert out.reject == (out.statistic > out.delta)

    def test_zero_psi1_se_degenerate(self):
        with pytest.raises(DegenerateTestError):
            surrogate_bias_test(u(0.5, 0.1), u(1.0, 0.0, order=1), 0.05, 0.0)

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 1.5])
    def test_alpha_range(self, alpha):
        with pytest.raises(ConfigError):
            surrogate_bias_test(u(0.5, 0.1), u(1.0, 0.1, order=1), alpha, 0.0)

    def test_negative_delta_rejected(self):
        with pytest.raises(ConfigError):
            surrogate_bias_test(u(0.5, 0.1), u(1.0, 0.1, order=1), 0.05, -0.1)

    def test_psi1_must_be_first_order(self):
        with pytest.raises(ConfigError):
            surrogate_bias_test(u(0.5, 0.1), u(1.0, 0.1, order=2), 0.05, 0.0)


@settings(max_examples=200, deadline=None)
@given(
    est=st.floats(-5, 5),
    if_se=st.floats(0, 2),
    psi1_se=st.floats(0.01, 2),
    alpha=st.floats(0.001, 0.5),
    d1=st.floats(0, 3),
    d2=st.floats(0, 3),
)
def test_monotone_nonincreasing_in_delta(est, if_se, psi1_se, alpha, d1, d2):
    lo, hi = sorted([d1, d2])
    psi1 = u(1.0, psi1_se, order=1)
    r_lo = surrogate_bias_test(u(est, if_se), psi1, alpha, lo)
    r_hi = surrogate_bias_test(u(est, if_se), psi1, alpha, hi)
    assert r_hi.reject <= r_lo.reject


@settings(max_examples=200, deadline=None)
@given(
    est=st.floats(-5, 5),
    if_se=st.floats(0, 2),
    psi1_se=st.floats(0.01, 2),
    a1=st.floats(0.001, 0.5),
    a2=st.floats(0.001, 0.5),
    delta=st.floats(0, 3),
)
def test_monotone_in_alpha(est, if_se, psi1_se, a1, a2, delta):
    # smaller alpha -> larger z -> statistic no larger -> reject no more often
    lo, hi = sorted([a1, a2])
    psi1 = u(1.0, psi1_se, order=1)
    r_small = surrogate_bias_test(u(est, if_se), psi1, lo, delta)
    r_big = surrogate_bias_test(u(est, if_se), psi1, hi, delta)
    assert r_small.reject <= r_big.reject


@settings(max_examples=200, deadline=None)
@given(
    est=st.floats(-5, 5),
    if_se=st.floats(0, 2),
    psi1_se=st.floats(0.01, 2),
    alpha=st.floats(0.001, 0.5),
    delta=st.floats(0, 3),
    scale=st.floats(0.01, 100),
)
def test_scale_equivariance(est, if_se, psi1_se, alpha, delta, scale):
    psi1 = u(1.0, psi1_se, order=1)
    base = surrogate_bias_test(u(est, if_se), psi1, alpha, delta)
    scaled = surrogate_bias_test(
        u(est * scale, if_se * scale), u(1.0, psi1_se * scale, order=1), alpha, delta
    )
    assert scaled.statistic == pytest.approx(base.statistic, rel=1e-9, abs=1e-9)
    if abs(base.statistic - delta) > 1e-7 * max(1.0, abs(base.statistic)):
        assert scaled.reject == base.reject
