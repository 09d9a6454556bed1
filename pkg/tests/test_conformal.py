import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acofi.conformal import (AciState, bellman_target, coverage_bound, lower_bound,
                             prefix_error_rates, quantile, record_and_update, score)

from oracles import quantile_by_sorting


@pytest.mark.parametrize("q,r,want", [(5, 3, 2), (3, 5, 0), (0.7, 0.7, 0)])
def test_score(q, r, want):
    assert score(q, r) == want


def test_quantile_examples():
    s = [0.1, 0.5, 0.9]
    assert quantile(s, 0.5) == 0.5
    assert quantile(s, 0.76) == math.inf
    assert quantile(s, 0.75) == 0.9
    assert quantile(s, -0.05) == 0.0
    assert quantile([], -0.05) == 0.0
    assert quantile(s, 0.0) == 0.0


def test_quantile_empty_set_is_infinite():
    assert quantile([], 0.3) == math.inf


def test_update_arithmetic():
    a = AciState.start(0.2, 0.05)
    err = a.update(1.0, 0.0)  # score 1 > q_1 = 0
    assert err == 1
    assert a.alpha_t == pytest.approx(0.16, abs=1e-15)
    b = AciState.start(0.2, 0.05)
    assert b.update(0.0, 0.0) == 0
    assert b.alpha_t == pytest.approx(0.21, abs=1e-15)


def test_err_uses_quantile_in_force():
    a = AciState.start(0.2, 0.05)
    a.q_t = math.inf
    assert a.update(1e300, 0.0) == 0
    a = AciState.start(0.2, 0.05)
    a.q_t = 0.5
    assert a.update(0.5, 0.0) == 0  # equal to q is not a miss
    assert a.scores == [0.5]


def test_record_and_update_is_pure():
    a = AciState.start(0.2, 0.05)
    err, b = record_and_update(a, 2.0, 1.0)
    assert err == 1 and a.scores == [] and a.alpha_t == 0.2 and a.t == 1
    assert b.scores == [1.0] and b.t == 2


def test_rejects_nonpositive_rate():
    with pytest.raises(ValueError):
        AciState.start(0.2, 0.0)


def test_lower_bound_examples():
    assert lower_bound(1.0, 0.0, 0.0, 0.98) == pytest.approx(1 / 0.98, abs=1e-6)
    assert lower_bound(1.0, math.inf, 0.0, 0.98) == -math.inf
    q, l, g = 0.3, 0.4, 0.98
    assert lower_bound(q + (1 - g) * l, q, l, g) == pytest.approx(0.0, abs=1e-15)


def test_coverage_bound_examples():
    assert coverage_bound(0.2, 0.05, 100) == pytest.approx(0.17, abs=1e-15)
    assert coverage_bound(0.5, 0.05, 1000) == pytest.approx(0.011, abs=1e-15)
    assert coverage_bound(0.2, 0.05, 400) == pytest.approx(coverage_bound(0.2, 0.05, 200) / 2)
    assert coverage_bound(0.2, 0.05, 1) >= 1
    with pytest.raises(ValueError):
        coverage_bound(0.2, 0.05, 0)


def test_bellman_target():
    assert bellman_target(0.5, 0.2, 0.9) == pytest.approx(0.05 + 0.18)
    assert bellman_target(0.2, 0.5, 0.9) == pytest.approx(0.2)


def test_prefix_error_rates():
    assert prefix_error_rates([1, 0, 0, 1]).tolist() == [1.0, 0.5, 1 / 3, 0.5]


# --- properties ----------------------------------------------------------

scores_st = st.lists(st.floats(0, 1e6, allow_nan=False), max_size=40)


@given(scores_st)
def test_escalation(stream):
    a = AciState.start(0.2, 0.05)
    for s in stream:
        before = a.alpha_t
        err = a.update(s, 0.0)
        assert (a.alpha_t < before) if err else (a.alpha_t > before)


@given(scores_st)
def test_saturation_guards(stream):
    a = AciState.start(0.2, 0.3)
    for s in stream:
        a.update(s, 0.0)
        if a.alpha_t > 1:
            assert a.q_t == 0.0
        if a.alpha_t < 1 / (len(a.scores) + 1):
            assert a.q_t == math.inf


@given(st.lists(st.floats(0, 10, allow_nan=False), max_size=30),
       st.floats(-1, 2, allow_nan=False), st.floats(-1, 2, allow_nan=False))
def test_quantile_monotone_in_level(values, p1, p2):
    s = sorted(values)
    lo, hi = min(p1, p2), max(p1, p2)
    assert quantile(s, lo) <= quantile(s, hi)


@settings(max_examples=300)
@given(st.lists(st.floats(0, 1e3, allow_nan=False), max_size=1000), st.floats(-0.5, 1.5))
def test_quantile_matches_sort_oracle(values, p):
    assert quantile(sorted(values), p) == quantile_by_sorting(values, p)


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=300),
       st.floats(0.01, 0.99), st.floats(0.001, 0.5))
def test_error_rate_bound_any_stream(stream, alpha, lam):
    a = AciState.start(alpha, lam)
    errs = [a.update(s, 0.0) for s in stream]
    rates = prefix_error_rates(errs)
    for T, rate in enumerate(rates, start=1):
        # upper side holds unconditionally
        assert rate - alpha <= coverage_bound(alpha, lam, T) + 1e-12


def test_scores_kept_sorted_with_duplicates():
    a = AciState.start(0.2, 0.05)
    for s in [0.3, 0.1, 0.3, 0.0, 0.2]:
        a.update(s, 0.0)
    assert a.scores == [0.0, 0.1, 0.2, 0.3, 0.3]
    assert a.t == 6
    np.testing.assert_equal(a.q_t, quantile(a.scores, 1 - a.alpha_t))
