import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qmann.fxp import FixedTensor, FormatMismatchError, OverflowCounter, QFormat
from qmann.similarity import (
    HammingWeights,
    SaturationError,
    SimilarityRecord,
    cosine_similarity,
    dot_error_decomposition,
    dot_similarity,
    hamming_backward,
    hamming_similarity,
    softmax_error_bound,
)

from oracles import hamming_backward_symbolic, hamming_per_bit, rational_round

Q25, Q52, Q54 = QFormat(2, 5), QFormat(5, 2), QFormat(5, 4)
HW = HammingWeights(-3, 8)

raw8 = st.integers(-127, 127)


def ft(raw, fmt=Q25):
    return FixedTensor(np.asarray(raw, dtype=np.int64), fmt)


# --- weights ---------------------------------------------------------------


def test_weights_increasing_and_total():
    w = HW.w
    assert np.all(np.diff(w) > 0)
    assert w[0] == 2.0**-11
    assert HW.total == 127 / 2048 == float(np.sum(w))


@given(st.integers(-6, 2), st.integers(2, 12))
def test_weight_total_closed_form(alpha, n):
    hw = HammingWeights(alpha, n)
    assert hw.total == (2 ** (n - 1) - 1) * 2.0 ** (alpha - n)


# --- dot product -----------------------------------------------------------


def test_dot_unit_vector():
    e = np.eye(5)[0]
    assert dot_similarity(e, e) == 1.0
    assert dot_similarity(e, e, Q52) == 1.0


def test_dot_saturates_in_q52():
    u = np.full(20, 1.5)
    rec, c = SimilarityRecord(), OverflowCounter()
    assert dot_similarity(u, u, Q52, record=rec, counter=c) == 31.75
    assert c.count > 0 and rec.overflow_events == c.count
    assert rec.values[0] == 45.0  # the unclamped sum is kept for histograms


def test_dot_length_mismatch():
    with pytest.raises(ValueError):
        dot_similarity([1.0, 2.0], [1.0])


def _dot_oracle(u, v, fmt):
    """Rational: quantize inputs, round each product, saturating running sum."""
    acc, over = Fraction(0), 0
    for a, b in zip(u, v):
        qa, o1 = rational_round(Fraction(float(a)), fmt)
        qb, o2 = rational_round(Fraction(float(b)), fmt)
        p, o3 = rational_round(qa * qb, fmt)
        acc, o4 = rational_round(acc + p, fmt)
        over += o1 + o2 + o3 + o4
    return acc, over


@given(st.lists(st.floats(-6, 6), min_size=1, max_size=16), st.data())
def test_dot_matches_rational_oracle(u, data):
    v = data.draw(st.lists(st.floats(-6, 6), min_size=len(u), max_size=len(u)))
    c = OverflowCounter()
    got = dot_similarity(u, v, Q52, counter=c)
    want, over = _dot_oracle(u, v, Q52)
    assert Fraction(got) == want
    assert c.count == over


@pytest.mark.parametrize("scale", [0.1, 0.5, 2.0])
def test_dot_error_within_first_and_second_order_terms(scale):
    rng = np.random.default_rng(1)
    r = Q54.resolution
    for _ in range(3000):
        u, v = rng.uniform(-scale, scale, 8), rng.uniform(-scale, scale, 8)
        err = abs(dot_similarity(u, v, Q54) - float(u @ v))
        assert err <= np.sum(np.abs(u) + np.abs(v)) * r + 8 * r * r


def test_decomposition_exact_inputs():
    u = np.array([0.5, -1.25, 2.0])
    z, first, resid = dot_error_decomposition(u, u[::-1], Q54)
    assert first == 0 and resid == 0 and z == float(u @ u[::-1])


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=8), st.data())
def test_decomposition_residual_identity(u, data):
    v = data.draw(st.lists(st.floats(-3, 3), min_size=len(u), max_size=len(u)))
    fmt = Q54
    z, first, resid = dot_error_decomposition(u, v, fmt)
    eu = [rational_round(Fraction(a), fmt)[0] - Fraction(a) for a in u]
    ev = [rational_round(Fraction(b), fmt)[0] - Fraction(b) for b in v]
    assert resid == pytest.approx(float(sum(a * b for a, b in zip(eu, ev))), abs=1e-15)
    assert abs(resid) <= len(u) * 2.0 ** (-2 * fmt.frac)


def test_decomposition_rejects_saturation():
    with pytest.raises(SaturationError):
        dot_error_decomposition(np.full(20, 1.5), np.full(20, 1.5), Q52)
    with pytest.raises(SaturationError):
        dot_error_decomposition([40.0], [1.0], Q52)


def test_cosine_reference():
    assert cosine_similarity([1, 0], [2, 0]) == 1.0
    assert cosine_similarity([0, 0], [1, 0]) == 0.0


# --- Hamming ---------------------------------------------------------------


@pytest.mark.parametrize("dim", [1, 3, 60])
def test_hamming_self_similarity(dim):
    rng = np.random.default_rng(dim)
    u = ft(rng.integers(0, 128, dim))
    assert hamming_similarity(u, u, HW) == dim * 127 / 2048


def test_hamming_opposite_signs():
    assert hamming_similarity(ft([32]), ft([-32]), HW) == -127 / 2048


def test_hamming_empty():
    assert hamming_similarity(ft([]), ft([]), HW) == 0.0


def test_hamming_checks_inputs():
    with pytest.raises(ValueError):
        hamming_similarity(ft([1, 2]), ft([1]), HW)
    with pytest.raises(FormatMismatchError):
        hamming_similarity(ft([1], Q25), ft([1], Q52), HW)
    with pytest.raises(FormatMismatchError):
        hamming_similarity(ft([1], QFormat(2, 3)), ft([1], QFormat(2, 3)), HW)


@given(st.lists(st.tuples(raw8, raw8), max_size=20), st.integers(-5, 0))
def test_hamming_matches_per_bit_oracle(pairs, alpha):
    u, v = [p[0] for p in pairs], [p[1] for p in pairs]
    hw = HammingWeights(alpha, 8)
    assert Fraction(hamming_similarity(ft(u), ft(v), hw)) == hamming_per_bit(u, v, 8, alpha)


@given(st.lists(st.tuples(raw8, raw8), min_size=1, max_size=40))
def test_hamming_symmetric_and_bounded(pairs):
    u, v = ft([p[0] for p in pairs]), ft([p[1] for p in pairs])
    s = hamming_similarity(u, v, HW)
    assert s == hamming_similarity(v, u, HW)
    assert abs(s) <= HW.bound(len(pairs))


def test_dot_saturates_where_hamming_does_not():
    # large same-sign vectors: the dot product runs off the Q5.2 range while
    # S_H on the very same vectors stays inside Q2.5
    for scale in (1.5, 3.0, 3.9):
        x = np.full(60, scale)
        c = OverflowCounter()
        dot_similarity(x, x, Q52, counter=c)
        assert c.count > 0
        t = FixedTensor.from_float(x, Q25)
        s = hamming_similarity(t, t, HW)
        assert t.overflow_count == 0
        assert abs(s) <= Q25.max_value


def test_hamming_backward_examples():
    assert hamming_backward(ft([32]), ft([-32]), HW).tolist() == [0.25]
    u = ft([5, -7, 0, 127])
    assert np.all(hamming_backward(u, u, HW) == 0)


@given(st.lists(st.tuples(raw8, raw8), min_size=1, max_size=30), st.integers(-5, 0))
def test_hamming_backward_matches_symbolic(pairs, alpha):
    u, v = [p[0] for p in pairs], [p[1] for p in pairs]
    hw = HammingWeights(alpha, 8)
    got = hamming_backward(ft(u), ft(v), hw)
    assert [Fraction(g) for g in got] == hamming_backward_symbolic(u, v, 8, alpha)
    # role swap gives the gradient w.r.t. V
    assert [Fraction(g) for g in hamming_backward(ft(v), ft(u), hw)] == hamming_backward_symbolic(v, u, 8, alpha)


def fd_sign_agreement(n_trials=20000, seed=0):
    """Share of one-step coordinate perturbations where the analytic gradient
    points the same way as the exact change of S_H (ties skipped)."""
    rng = np.random.default_rng(seed)
    agree = total = 0
    for _ in range(n_trials):
        u = rng.integers(-127, 128, 4)
        v = rng.integers(-127, 128, 4)
        i = rng.integers(4)
        step = rng.choice([-1, 1])
        if abs(u[i] + step) > 127:
            continue
        g = hamming_backward(ft(u), ft(v), HW)[i] * step
        u2 = u.copy()
        u2[i] += step
        d = hamming_similarity(ft(u2), ft(v), HW) - hamming_similarity(ft(u), ft(v), HW)
        if g == 0 or d == 0:
            continue
        total += 1
        agree += (g > 0) == (d > 0)
    return agree / total


def test_hamming_backward_sign_agrees_with_one_step_change():
    # statistical gate: the gradient should point the way S_H actually moves
    # for at least 90% of single resolution-step perturbations
    rate = fd_sign_agreement(5000)
    assert rate >= 0.9, f"sign agreement {rate:.1%}"


# --- softmax perturbation --------------------------------------------------


def test_softmax_bound_zero_and_constant_eps():
    z = np.array([0.3, -1.0, 2.0])
    assert np.allclose(softmax_error_bound(z, np.zeros(3)).ratios, 1)
    assert np.allclose(softmax_error_bound(z, np.full(3, 0.7)).ratios, 1)


@given(
    st.lists(st.floats(-10, 10), min_size=2, max_size=12),
    st.data(),
)
def test_softmax_bound_spread_reading(z, data):
    eps = data.draw(st.lists(st.floats(-0.25, 0.25), min_size=len(z), max_size=len(z)))
    r = softmax_error_bound(z, eps)
    assert r.holds_spread


def test_softmax_max_reading_can_fail():
    # one slot pushed up by e, many pushed down by e: the ratio approaches
    # exp(2e), past exp(max|eps|) = exp(e)
    eps = np.full(200, -0.25)
    eps[0] = 0.25
    r = softmax_error_bound(np.zeros(200), eps)
    assert r.holds_spread and not r.holds_max
    assert math.isclose(r.eps_spread, 0.5)


# --- record ----------------------------------------------------------------


def test_record_histogram_counts_sum():
    rec = SimilarityRecord()
    rec.add([1.0, 2.0, 100.0])
    rec.add([], 3)
    counts, edges = rec.histogram(5)
    assert counts.sum() == len(rec) == 3
    assert rec.overflow_events == 3
