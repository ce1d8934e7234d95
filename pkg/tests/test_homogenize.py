import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradgibbs.errors import PreconditionError
from gradgibbs.homogenize import (
    Corrector,
    EffectiveMatrix,
    VectorField,
    corrector,
    cycle_check,
    decompose,
    divergence,
    effective_matrix_from_corrector,
    one_dimensional_corrector,
    orbit_average,
    position_field,
    recombine,
    regularized_poisson,
    tilted_conditional_mean,
)
from gradgibbs.lattice import ConductanceField, Torus, edge_differences, read_fields
from gradgibbs.operator import apply_L


def random_kappa(torus, rng, values=(1.0, 4.0)):
    return ConductanceField(torus, rng.choice(values, size=(torus.d, torus.n_sites)))


def test_cycle_check_gradient_and_position():
    t = Torus(2, 5)
    h = np.random.default_rng(0).normal(size=t.n_sites)
    u = VectorField.from_gradient(t, h)
    rep = cycle_check(u)
    assert rep.plaquette < 1e-12 and u.closed
    assert np.abs(rep.winding).max() < 1e-12
    pos = position_field(t)
    rep = cycle_check(pos)
    assert rep.plaquette == 0 and pos.closed
    np.testing.assert_array_equal(rep.winding, 5.0)


def test_cycle_check_single_perturbation():
    t = Torus(2, 4)
    u = VectorField.from_gradient(t, np.arange(16.0))
    u.u[0, 5] += 0.25
    rep = cycle_check(u)
    assert rep.plaquette == pytest.approx(0.25)
    assert not u.closed


def test_divergence_examples():
    t = Torus(1, 3)
    k = ConductanceField(t, [[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(divergence(k, position_field(t)), [-2, 1, 1])
    t2 = Torus(2, 6)
    assert np.all(divergence(ConductanceField.constant(t2), position_field(t2)) == 0)
    rng = np.random.default_rng(1)
    k2 = random_kappa(t2, rng)
    h = rng.normal(size=t2.n_sites)
    np.testing.assert_allclose(divergence(k2, VectorField.from_gradient(t2, h)), apply_L(k2, h), atol=1e-12)
    u = VectorField(t2, rng.normal(size=(2, 36)))
    assert abs(divergence(k2, u).sum()) <= 1e-9 * np.abs(u.u).sum()


def test_corrector_constant_is_zero():
    t = Torus(2, 8)
    c = corrector(ConductanceField.constant(t, 3.0))
    assert np.all(c.chi == 0)
    np.testing.assert_array_equal(c.harmonic_coordinate(1, [[2, 3], [-1, 9]]), [3, 9])


def test_corrector_two_site_ring():
    t = Torus(1, 2)
    k = ConductanceField(t, [[1.0, 2.0]])
    c = corrector(k)
    assert c.chi_bar(0)[1] == pytest.approx(1 / 3, abs=1e-12)
    y = c.harmonic_coordinate(0, np.arange(-3, 4)[:, None])
    np.testing.assert_allclose(y[3:5], [0, 4 / 3], atol=1e-12)
    # harmonic on the cover: kappa-weighted increments balance at every site
    kap = np.array([1.0, 2.0])[np.arange(-3, 3) % 2]
    flux = kap * np.diff(y)
    np.testing.assert_allclose(flux[1:] - flux[:-1], 0, atol=1e-12)
    assert tilted_conditional_mean(c, [1.0], [1]) == pytest.approx(4 / 3)
    assert tilted_conditional_mean(c, [0.0], [1]) == 0


@pytest.mark.parametrize("L", [7, 50, 301])
def test_corrector_matches_one_dimensional_formula(L):
    t = Torus(1, L)
    k = random_kappa(t, np.random.default_rng(L))
    c = corrector(k, tol=1e-12)
    np.testing.assert_allclose(c.chi_bar(0), one_dimensional_corrector(k), atol=1e-9)


@pytest.mark.parametrize("method", ["cg", "direct"])
@pytest.mark.parametrize("d,L", [(2, 12), (3, 6)])
def test_corrector_residual_harmonicity_orthogonality(d, L, method):
    t = Torus(d, L)
    rng = np.random.default_rng(d)
    k = random_kappa(t, rng)
    c = corrector(k, tol=1e-11, method=method)
    assert c.residual <= 1e-9 * np.abs(k.kappa).max()
    h = rng.normal(size=t.n_sites)
    gh = edge_differences(t, h)
    for j in range(d):
        inc = c.increments(j)
        assert np.abs(divergence(k, inc)).max() < 1e-8
        inner = np.sum(k.kappa * gh * inc)
        assert abs(inner) <= 1e-8 * np.linalg.norm(gh) * np.linalg.norm(inc)
        assert abs(c.chi[j].mean()) < 1e-12


def test_effective_matrix_homogeneous_calibration():
    t = Torus(2, 6)
    q = effective_matrix_from_corrector([ConductanceField.constant(t, 1.7)])
    np.testing.assert_allclose(q.q, 2 * 1.7 * np.eye(2), atol=1e-14)
    assert q.method == "corrector"


def test_effective_matrix_one_dimensional_series_law():
    t = Torus(1, 4096)
    rng = np.random.default_rng(2)
    envs = [random_kappa(t, rng) for _ in range(4)]
    q = effective_matrix_from_corrector(envs)
    # per environment the value is twice the harmonic mean of the ring
    exact = np.mean([2 / np.mean(1 / e.kappa) for e in envs])
    assert q.q[0, 0] == pytest.approx(exact, rel=1e-9)
    assert q.q[0, 0] / 2 == pytest.approx(1.6, rel=0.02)


def test_effective_matrix_accepts_correctors_and_rejects_junk():
    t = Torus(2, 4)
    k = random_kappa(t, np.random.default_rng(3))
    a = effective_matrix_from_corrector([corrector(k)])
    b = effective_matrix_from_corrector([k])
    np.testing.assert_allclose(a.q, b.q)
    with pytest.raises(PreconditionError):
        effective_matrix_from_corrector([np.ones((2, 16))])
    with pytest.raises(PreconditionError):
        effective_matrix_from_corrector([])


def test_effective_matrix_validation_and_json():
    with pytest.raises(ValueError):
        EffectiveMatrix(np.array([[1.0, 0.5], [0.4, 1.0]]), "walk")
    with pytest.raises(ValueError):
        EffectiveMatrix(np.array([[1.0, 2.0], [2.0, 1.0]]), "walk")
    q = EffectiveMatrix(np.array([[2.0, 0.1], [0.1, 3.0]]), "walk", np.full((2, 2), 0.01), 10)
    back = EffectiveMatrix.from_dict(q.to_dict())
    np.testing.assert_array_equal(back.q, q.q)
    assert back.method == "walk" and back.n_samples == 10


def test_regularized_poisson_constant():
    h = regularized_poisson(np.full(9, 2.0), 0.1)
    np.testing.assert_allclose(h, -20.0)


@settings(max_examples=30)
@given(st.integers(0, 2**31), st.sampled_from([1e-3, 0.05, 1.0]), st.sampled_from([(1, 11), (2, 6), (3, 4)]))
def test_regularized_poisson_identity(seed, eps, size):
    t = Torus(*size)
    u = np.random.default_rng(seed).normal(size=t.n_sites)
    for direction in range(t.d):
        h = regularized_poisson(u, eps, t, direction)
        Th = h[t.forward[direction]]
        assert np.abs((1 + eps) * h - Th + u).max() <= 1e-10 * max(1, np.abs(u).max())


def test_regularized_poisson_matches_truncated_series():
    rng = np.random.default_rng(4)
    u = rng.normal(size=13)
    eps = 0.3
    h = regularized_poisson(u, eps)
    ref = -sum(np.roll(u, -n) / (1 + eps) ** (n + 1) for n in range(400))
    np.testing.assert_allclose(h, ref, atol=1e-12)


def test_regularized_poisson_decay_on_corrector_increments():
    t = Torus(1, 512)
    k = random_kappa(t, np.random.default_rng(5))
    u1 = corrector(k).increments(0)[0] - 1.0
    norms = [eps * np.linalg.norm(regularized_poisson(u1, eps)) for eps in (1e-1, 1e-2, 1e-3)]
    assert norms[0] > norms[1] > norms[2]


def test_decompose_gradient_and_position():
    t = Torus(2, 8)
    rng = np.random.default_rng(6)
    k = random_kappa(t, rng)
    c = corrector(k)
    h = rng.normal(size=t.n_sites)
    u = VectorField.from_gradient(t, h)
    g, lam = decompose(k, u, c)
    np.testing.assert_allclose(lam, 0, atol=1e-14)
    np.testing.assert_allclose(g.u, u.u, atol=1e-14)
    g, lam = decompose(k, position_field(t), c)
    np.testing.assert_allclose(lam, [1, 1])
    chi_inc = sum(edge_differences(t, c.chi[j]) for j in range(2))
    np.testing.assert_allclose(g.u, -chi_inc, atol=1e-12)


def test_decompose_random_closed_field():
    t = Torus(2, 10)
    rng = np.random.default_rng(7)
    k = random_kappa(t, rng)
    c = corrector(k)
    lam_true = np.array([0.7, -1.3])
    u = VectorField(t, edge_differences(t, rng.normal(size=t.n_sites)) + lam_true[0] * position_field(t, 0).u + lam_true[1] * position_field(t, 1).u)
    g, lam = decompose(k, u, c)
    np.testing.assert_allclose(lam, lam_true, atol=1e-12)
    rep = cycle_check(g)
    assert rep.closed and np.abs(rep.winding).max() < 1e-9
    assert np.abs(g.u.mean(axis=1)).max() < 1e-12
    back = recombine(g, lam, c)
    assert np.linalg.norm(back.u - u.u) / np.linalg.norm(u.u) <= 1e-8


def test_decompose_divergence_free_has_no_gradient_part():
    t = Torus(2, 8)
    k = random_kappa(t, np.random.default_rng(8))
    c = corrector(k, tol=1e-12)
    u = VectorField(t, 0.4 * c.increments(0) - 2.0 * c.increments(1))
    g, lam = decompose(k, u, c)
    np.testing.assert_allclose(lam, [0.4, -2.0], atol=1e-10)
    assert np.linalg.norm(g.u) <= 1e-8


def test_decompose_rejects_open_field():
    t = Torus(2, 4)
    u = VectorField(t, np.random.default_rng(9).normal(size=(2, 16)))
    with pytest.raises(PreconditionError):
        decompose(ConductanceField.constant(t), u)


def test_orbit_average_matches_loop():
    t = Torus(2, 5)
    u = np.random.default_rng(10).normal(size=t.n_sites)
    for n in (1, 3, 5, 12):
        ref = sum(u[_shift_index(t, m)] for m in range(n)) / n
        np.testing.assert_allclose(orbit_average(u, n, t), ref, atol=1e-12)


def _shift_index(t, m):
    idx = np.arange(t.n_sites)
    for _ in range(m):
        idx = t.forward[0][idx]
    return idx


def test_orbit_averages_of_zero_mean_closed_field_shrink():
    t = Torus(2, 256)
    rng = np.random.default_rng(11)
    rms = []
    for n in (4, 16, 64):
        vals = []
        for _ in range(3):
            k = random_kappa(Torus(2, 256), rng)
            g, _ = decompose(k, position_field(t, 0), corrector(k))
            vals.append(np.sqrt(np.mean(orbit_average(g.u[0], n, t) ** 2)))
        rms.append(np.mean(vals))
    assert rms[0] > rms[1] > rms[2]
    # at least the n^(-1/2) rate
    assert rms[2] <= 1.5 * rms[0] * (4 / 64) ** 0.5


def test_corrector_export(tmp_path):
    t = Torus(2, 4)
    c = corrector(random_kappa(t, np.random.default_rng(12)))
    c.save(tmp_path / "chi.bin")
    with open(tmp_path / "chi.bin", "rb") as fh:
        recs = list(read_fields(fh))
    assert len(recs) == 2
    np.testing.assert_array_equal(recs[1][2], c.chi[1])
    assert isinstance(c, Corrector)
