from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chronoqec.channel import (
    ChannelMap,
    LogicalState,
    apply_channel,
    contraction_factors,
    dense_pauli_channel,
    density_from_bloch,
    hazard_threshold,
    logical_suppression,
    pauli_from_regime,
)


def plain_map(w=None, d=3, base=0.03, bias=None):
    w = np.zeros((4, 3)) if w is None else w
    return ChannelMap(np.asarray(w, dtype=float), d, 0.1, base, np.zeros(4) if bias is None else bias)


def dense_fidelity(rho, initial_bloch):
    return float(np.real(np.trace(rho @ density_from_bloch(initial_bloch))))


def random_state(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v) * rng.uniform(0.0, 1.0) ** (1 / 3)


def random_logical(rng):
    q = np.empty(4)
    q[1:] = rng.uniform(0.0, 0.25, size=3)
    q[0] = 1.0 - q[1:].sum()
    return q


# ---------------------------------------------------------------- softmax


def test_zero_theta_is_uniform():
    assert np.allclose(pauli_from_regime(plain_map(np.ones((4, 3))), np.zeros(3)), 0.25, atol=1e-15)


def test_softmax_saturates_to_identity():
    w = np.vstack([np.zeros(3), -1e3 * np.ones((3, 3))])
    p = pauli_from_regime(plain_map(w), np.ones(3))
    assert p[0] == pytest.approx(1.0, abs=1e-15)


def test_softmax_matches_extended_precision_formula():
    getcontext().prec = 50
    w = np.random.default_rng(11).normal(scale=0.3, size=(4, 3))
    theta = np.array([1.0, 0.0, 0.0])
    p = pauli_from_regime(plain_map(w), theta)
    logits = [sum(Decimal(float(w[i, j])) * Decimal(float(theta[j])) for j in range(3)) for i in range(4)]
    exps = [x.exp() for x in logits]
    total = sum(exps)
    ref = np.array([float(e / total) for e in exps])
    assert np.max(np.abs(p - ref)) < 1e-14


def test_softmax_is_stable_for_huge_logits():
    p = pauli_from_regime(plain_map(np.full((4, 3), 1e3)), np.full(3, 1e3))
    assert np.all(np.isfinite(p))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.integers(0, 2**31))
def test_simplex_preserved_through_both_stages(theta, seed):
    rng = np.random.default_rng(seed)
    for d in (3, 5, 7):
        cmap = plain_map(rng.normal(size=(4, 3)), d=d, base=rng.uniform(0, 1))
        p = pauli_from_regime(cmap, np.array(theta))
        q = logical_suppression(cmap, p)
        for dist in (p, q):
            assert np.all(dist >= 0)
            assert abs(dist.sum() - 1.0) < 1e-12
        assert np.all((contraction_factors(q) >= 0) & (contraction_factors(q) <= 1))


# ---------------------------------------------------------------- suppression


def test_no_physical_error_gives_identity_channel():
    q = logical_suppression(plain_map(), np.array([1.0, 0.0, 0.0, 0.0]))
    assert np.array_equal(q, [1.0, 0.0, 0.0, 0.0])


def test_suppression_grows_with_distance():
    p = np.array([0.85, 0.05, 0.04, 0.06])
    q3 = logical_suppression(plain_map(d=3), p)
    q7 = logical_suppression(plain_map(d=7), p)
    assert np.all(q7[1:] < q3[1:])


@pytest.mark.parametrize("d", [3, 5, 7, 9])
def test_threshold_is_fixed_point(d):
    q = logical_suppression(plain_map(d=d, base=0.03), np.array([0.7, 0.1, 0.1, 0.1]))
    assert np.allclose(q[1:], 0.03, rtol=1e-14)


def test_suppression_exponent():
    assert [plain_map(d=d).exponent for d in (3, 5, 7)] == [2, 3, 4]


def test_suppression_clamps_to_quarter():
    q = logical_suppression(plain_map(base=1.0), np.array([0.0, 0.4, 0.3, 0.3]))
    assert np.allclose(q[1:], 0.25)
    assert q[0] == pytest.approx(0.25)


def test_channel_map_rejects_even_distance():
    with pytest.raises(ValueError):
        plain_map(d=4)


# ---------------------------------------------------------------- channel application


def test_identity_channel_leaves_state():
    s = LogicalState.encoded((1.0, 0.0, 0.0))
    new, risk = apply_channel(s, np.array([1.0, 0.0, 0.0, 0.0]))
    assert np.array_equal(new.bloch, s.bloch)
    assert risk == 0.0


def test_zero_state_example_against_dense_oracle():
    s = LogicalState.encoded((0.0, 0.0, 1.0))
    q = np.array([0.8 - 0.05, 0.1, 0.1, 0.05])
    new, risk = apply_channel(s, q)
    assert new.bloch[2] == pytest.approx(0.6, abs=1e-15)
    assert new.fidelity == pytest.approx(0.8, abs=1e-12)
    assert new.hazard == pytest.approx(0.2, abs=1e-12)
    rho = dense_pauli_channel(density_from_bloch(s.bloch), q)
    assert abs(dense_fidelity(rho, s.initial_bloch) - new.fidelity) < 1e-12


def test_bloch_path_matches_dense_oracle_on_random_cases():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        b0 = random_state(rng)
        pure = b0 / max(np.linalg.norm(b0), 1e-12)
        s = LogicalState(b0.copy(), pure, 0.5 * (1 + b0 @ pure), 0.5 * (1 - b0 @ pure))
        q = random_logical(rng)
        new, _ = apply_channel(s, q)
        rho = dense_pauli_channel(density_from_bloch(b0), q)
        bloch_dense = np.real([np.trace(rho @ P) for P in (
            np.array([[0, 1], [1, 0]]), np.array([[0, -1j], [1j, 0]]), np.array([[1, 0], [0, -1]]))])
        assert np.max(np.abs(bloch_dense - new.bloch)) < 1e-12


def test_composition_is_multiplicative():
    rng = np.random.default_rng(1)
    for _ in range(500):
        s = LogicalState.encoded((1.0, 0.0, 0.0))
        q0, q1 = random_logical(rng), random_logical(rng)
        a, _ = apply_channel(s, q0)
        b, _ = apply_channel(a, q1)
        assert np.allclose(b.bloch, contraction_factors(q0) * contraction_factors(q1) * s.bloch, atol=1e-15)
        rho = dense_pauli_channel(dense_pauli_channel(density_from_bloch(s.bloch), q0), q1)
        assert abs(dense_fidelity(rho, s.initial_bloch) - b.fidelity) < 1e-12


def test_hazard_identity_and_monotone_risk():
    rng = np.random.default_rng(2)
    s = LogicalState.encoded((0.0, 1.0, 0.0))
    for _ in range(300):
        prev = s.hazard
        q = np.empty(4)
        q[1:] = rng.uniform(0.0, 0.01, size=3)
        q[0] = 1.0 - q[1:].sum()
        s, risk = apply_channel(s, q)
        assert s.hazard == 1.0 - s.fidelity
        assert s.hazard >= prev
        assert risk >= 0.0
        assert np.linalg.norm(s.bloch) <= 1 + 1e-9


def test_encoded_rejects_unphysical_bloch():
    with pytest.raises(ValueError):
        LogicalState.encoded((1.0, 1.0, 0.0))


# ---------------------------------------------------------------- threshold


def test_threshold_arithmetic():
    assert hazard_threshold(4, 0.1) == pytest.approx(0.2, abs=1e-15)


def test_threshold_values_for_code_distances():
    got = [round(hazard_threshold(d, 0.2), 4) for d in (3, 5, 7)]
    getcontext().prec = 40
    ref = [round(float(Decimal(d).sqrt() * Decimal("0.2")), 4) for d in (3, 5, 7)]
    assert got == ref == [0.3464, 0.4472, 0.5292]
    assert hazard_threshold(3, 0.2) < hazard_threshold(7, 0.2)


def test_threshold_rejects_nonpositive_c():
    with pytest.raises(ValueError):
        hazard_threshold(3, 0.0)
