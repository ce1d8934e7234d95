import json

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradgibbs.potential import (
    MixtureMeasure,
    eval_V,
    kappa_posterior,
    posterior_weights,
    self_dual_p,
    single_atom,
    two_atom,
)

# frozen from a 40-digit mpmath evaluation (see test_frozen_values_match_mpmath)
V_HALF_4_1_AT_1 = 0.9917339025771929
POST_KAPPA4_AT_2 = 2.472623156634774e-3


def test_frozen_values_match_mpmath():
    mp.mp.dps = 40
    half = mp.mpf(1) / 2
    v = -mp.log(half * mp.e**-2 + half * mp.e ** (-half))
    w = mp.e**-8 / (mp.e**-8 + mp.e**-2)
    assert float(v) == pytest.approx(V_HALF_4_1_AT_1, rel=1e-15)
    assert float(w) == pytest.approx(POST_KAPPA4_AT_2, rel=1e-15)


def test_single_atom_is_quadratic():
    assert eval_V(single_atom(2.0), 1.0) == pytest.approx(1.0, abs=1e-15)
    eta = np.linspace(-10, 10, 201)
    assert np.max(np.abs(eval_V(single_atom(3.5), eta) - 0.5 * 3.5 * eta**2)) < 1e-12


@pytest.mark.parametrize("rho", [single_atom(1.0), two_atom(0.3, 4, 1), two_atom(0.5, 100, 1)])
def test_V_vanishes_at_zero(rho):
    assert eval_V(rho, 0.0) == pytest.approx(0.0, abs=1e-15)


def test_V_two_atom_value():
    assert eval_V(two_atom(0.5, 4, 1), 1.0) == pytest.approx(V_HALF_4_1_AT_1, rel=1e-14)


def test_V_no_overflow_for_large_eta():
    rho = two_atom(0.5, 4, 1)
    v = eval_V(rho, 1e3)
    # the smallest conductance dominates: V ~ kappa_min eta^2 / 2 - log(w_min)
    assert np.isfinite(v)
    assert v == pytest.approx(0.5 * 1e6 - np.log(0.5), rel=1e-12)


@given(st.floats(-50, 50, allow_nan=False))
def test_V_even(eta):
    rho = two_atom(0.3, 9.0, 0.5)
    assert eval_V(rho, eta) == eval_V(rho, -eta)


def test_posterior_examples():
    rho = two_atom(0.5, 4, 1)
    assert kappa_posterior(rho, 2.0).weights[0] == pytest.approx(POST_KAPPA4_AT_2, rel=1e-13)
    np.testing.assert_allclose(kappa_posterior(rho, 0.0).weights, rho.weights, atol=1e-15)
    assert kappa_posterior(single_atom(3.0), 17.0).weights.tolist() == [1.0]


@settings(max_examples=50)
@given(st.floats(-30, 30, allow_nan=False))
def test_posterior_consistency(eta):
    rho = MixtureMeasure(((0.5, 1.0), (2.0, 3.0), (7.0, 0.2)))
    w = kappa_posterior(rho, eta).weights
    assert abs(w.sum() - 1) < 1e-12
    lhs = w * np.exp(-eval_V(rho, eta))
    rhs = rho.weights * np.exp(-0.5 * rho.kappa * eta**2)
    mask = rhs > 1e-300
    np.testing.assert_allclose(lhs[mask], rhs[mask], rtol=1e-10)


def test_posterior_vectorized_matches_scalar():
    rho = two_atom(0.4, 4, 1)
    eta = np.linspace(-3, 3, 13)
    W = posterior_weights(rho, eta)
    for e, w in zip(eta, W):
        np.testing.assert_allclose(w, kappa_posterior(rho, e).weights)


def test_self_dual_p():
    assert self_dual_p(2.0, 2.0) == 0.5
    assert self_dual_p(16, 1) == pytest.approx(1 / 3, abs=1e-15)
    assert self_dual_p(1, 16) == pytest.approx(2 / 3, abs=1e-15)
    with pytest.raises(ValueError):
        self_dual_p(0, 1)
    with pytest.raises(ValueError):
        self_dual_p(1, -2)


def test_nonconvexity_detected_for_large_ratio():
    k1, k2 = 100.0, 1.0
    rho = two_atom(self_dual_p(k1, k2), k1, k2)
    eta = np.linspace(0, 5, 2001)
    h = eta[1] - eta[0]
    v = eval_V(rho, eta)
    second = (v[2:] - 2 * v[1:-1] + v[:-2]) / h**2
    assert second.min() < 0


def test_convex_when_atoms_close():
    rho = two_atom(0.5, 1.2, 1.0)
    eta = np.linspace(0, 5, 501)
    h = eta[1] - eta[0]
    v = eval_V(rho, eta)
    assert ((v[2:] - 2 * v[1:-1] + v[:-2]) / h**2).min() > 0


def test_normalized_view():
    rho = MixtureMeasure(((1.0, 2.0), (3.0, 5.0), (4.0, 0.25)))
    assert abs(rho.weights.sum() - 1) < 1e-12


@pytest.mark.parametrize(
    "atoms",
    [(), ((1.0, 1.0), (1.0, 2.0)), ((0.0, 1.0),), ((1.0, -1.0),), ((1e-4, 1.0),), ((1e4, 1.0),)],
)
def test_invalid_mixtures(atoms):
    with pytest.raises(ValueError):
        MixtureMeasure(atoms)


def test_floor_is_configurable():
    MixtureMeasure(((1e-4, 1.0),), floor=1e-5)


def test_json_roundtrip():
    rho = two_atom(0.25, 4.0, 1.0)
    text = rho.to_json()
    assert json.loads(text) == {"atoms": [{"kappa": 4.0, "weight": 0.25}, {"kappa": 1.0, "weight": 0.75}]}
    assert MixtureMeasure.from_json(text) == rho
    with pytest.raises(ValueError):
        MixtureMeasure.from_dict({"atom": []})
