import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tapepolicy import tape as tp
from tapepolicy.smooth import (
    PenaltyConfig,
    max_gap,
    rational_sigmoid,
    smooth_max,
    smooth_min,
    smooth_relu,
    transition_width,
    violation_penalty,
)

# frozen from a 30-digit mpmath evaluation of the closed forms
SM_ORIGIN_50 = 0.0707106781186547524400844362105
SM_3_M1_50 = 3.00124960961895005687341544088
SR_10_50 = 10.0004999750024996875437434385
SR_M10_50 = 0.000499975002499687543743438530976
RS_1_50 = 0.999900029990003498740461828464
PEN_2_L10_50 = 40.0999376557634213507587385025

finite = st.floats(-1e3, 1e3, allow_nan=False)
sharp = st.floats(0.5, 2000.0)


def test_smooth_max_values():
    assert smooth_max(0.0, 0.0, 50) == pytest.approx(SM_ORIGIN_50, rel=1e-15)
    assert smooth_max(0.0, 0.0, 50) == pytest.approx(math.sqrt(1 / 50) / 2, rel=1e-15)
    assert smooth_max(3.0, -1.0, 50) == pytest.approx(SM_3_M1_50, rel=1e-15)


def test_smooth_relu_values():
    assert smooth_relu(0.0, 50) == pytest.approx(SM_ORIGIN_50, rel=1e-15)
    assert smooth_relu(0.0, 50) != 0.0
    assert smooth_relu(10.0, 50) == pytest.approx(SR_10_50, rel=1e-14)
    assert smooth_relu(-10.0, 50) == pytest.approx(SR_M10_50, rel=1e-9)


def test_rational_sigmoid_values():
    assert rational_sigmoid(0.0, 7.0) == 0.5
    assert rational_sigmoid(1.0, 50) == pytest.approx(RS_1_50, rel=1e-15)


def test_violation_penalty_values():
    assert violation_penalty(0.0, PenaltyConfig(1.0, 50)) == pytest.approx(0.005, rel=1e-14)
    assert violation_penalty(5.0, PenaltyConfig(0.0, 50)) == 0.0
    assert violation_penalty(2.0, PenaltyConfig(10.0, 50)) == pytest.approx(PEN_2_L10_50, rel=1e-14)
    with pytest.raises(ValueError):
        PenaltyConfig(-1.0)


def test_smooth_min_values():
    assert smooth_min(0.0, 0.0, 50) == pytest.approx(-SM_ORIGIN_50, rel=1e-15)
    assert smooth_min(3.0, -1.0, 50) == pytest.approx(-SM_3_M1_50 + 2.0, rel=1e-14)


def test_helpers():
    assert max_gap(50) == pytest.approx(SM_ORIGIN_50)
    assert transition_width(50) == pytest.approx(0.04)
    with pytest.raises(ValueError):
        smooth_max(1.0, 2.0, 0.0)


@given(finite, finite, sharp)
def test_smooth_max_bounds_and_symmetry(a, b, k):
    s = smooth_max(a, b, k)
    assert s >= max(a, b)
    assert s - max(a, b) <= max_gap(k) * (1 + 1e-12) + 1e-12
    assert s == smooth_max(b, a, k)
    m = smooth_min(a, b, k)
    assert m <= min(a, b)
    assert m == smooth_min(b, a, k)


@given(finite, finite, sharp, sharp)
def test_smooth_max_tightens_with_k(a, b, k1, k2):
    lo, hi = sorted((k1, k2))
    assert smooth_max(a, b, lo) >= smooth_max(a, b, hi)


@given(finite, finite, sharp)
def test_smooth_max_partials_sum_to_one(a, b, k):
    t = tp.record(lambda i, p, r: smooth_max(i[0], i[1], k), 2)
    ws = t.workspace()
    tp.forward(t, [a, b], ws=ws)
    g = tp.reverse(t, [1.0], ws).input_grads
    d = a - b
    closed = 0.5 * (1 + d / math.sqrt(d * d + 1 / k))
    assert 0.0 <= g[0] <= 1.0
    assert g[0] == pytest.approx(closed, rel=1e-12, abs=1e-15)
    assert g[0] + g[1] == pytest.approx(1.0, abs=1e-15)


@given(st.floats(-50, 50), sharp)
def test_rational_sigmoid_range_and_antisymmetry(x, k):
    s = rational_sigmoid(x, k)
    assert 0.0 <= s <= 1.0
    assert rational_sigmoid(-x, k) == pytest.approx(1.0 - s, abs=1e-15)


@given(st.floats(-100, 100), st.floats(-100, 100), sharp)
def test_smooth_relu_positive_monotone(x, y, k):
    assert smooth_relu(x, k) > 0.0 or x < -1e6
    lo, hi = sorted((x, y))
    assert smooth_relu(lo, k) <= smooth_relu(hi, k)


def test_rational_sigmoid_derivative_positive_with_peak_at_origin():
    k = 50.0
    t = tp.record(lambda i, p, r: rational_sigmoid(i[0], k), 1)
    ws = t.workspace()
    xs = np.linspace(-2, 2, 801)
    grads = []
    for x in xs:
        tp.forward(t, [x], ws=ws)
        grads.append(tp.reverse(t, [1.0], ws).input_grads[0])
    grads = np.array(grads)
    assert np.all(grads > 0)
    assert grads.max() == pytest.approx(k / 2, rel=1e-12)
    assert xs[np.argmax(grads)] == 0.0
    h = 1e-7
    fd0 = (rational_sigmoid(h, k) - rational_sigmoid(-h, k)) / (2 * h)
    assert fd0 == pytest.approx(k / 2, rel=1e-6)


def test_tape_matches_plain_for_all_surrogates():
    def b(i, p, r):
        x, y = i
        return [
            smooth_max(x, y, 50),
            smooth_relu(x, 50),
            rational_sigmoid(y, 50),
            violation_penalty(x - y, PenaltyConfig(3.0, 50)),
            smooth_min(x, y, 50),
        ]

    gen = np.random.default_rng(3)
    t = tp.record(b, 2)
    worst = 0.0
    for x in gen.normal(scale=3, size=(200, 2)):
        plain = np.array(b(list(x), [], []))
        taped = tp.forward(t, x)
        worst = max(worst, float(np.max(np.abs(taped - plain) / np.maximum(np.abs(plain), 1e-300))))
    assert worst < 1e-15
