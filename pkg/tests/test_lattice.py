import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradgibbs.errors import InconsistencyError
from gradgibbs.lattice import (
    ConductanceField,
    GradientField,
    HeightField,
    Torus,
    grad,
    integrate,
    load_field,
    plaquette_defect,
    read_fields,
    save_field,
    shift,
    to_csv,
    winding_sums,
    write_fields,
)

SIZES = [(1, 2), (1, 3), (1, 7), (2, 2), (2, 3), (2, 6), (3, 2), (3, 3), (3, 4)]


@pytest.mark.parametrize("d,L", SIZES)
def test_counts_and_degree(d, L):
    t = Torus(d, L)
    assert t.n_sites == L**d
    assert t.n_edges == d * L**d
    tail, head = t.edge_endpoints()
    degree = np.bincount(np.concatenate([tail.ravel(), head.ravel()]), minlength=t.n_sites)
    assert np.all(degree == 2 * d)


def test_row_major_coordinate_zero_fastest():
    t = Torus(2, 3)
    assert t.index((1, 0)) == 1
    assert t.index((0, 1)) == 3
    assert t.index((-1, 0)) == 2
    np.testing.assert_array_equal(t.coords[5], [2, 1])


def test_grad_examples():
    t = Torus(1, 3)
    assert np.all(grad(HeightField.zeros(Torus(2, 4))).eta == 0)
    np.testing.assert_array_equal(grad(HeightField(t, [0, 2, 5])).eta, [[2, 3, -5]])


def test_integrate_2x2_roundtrip():
    t = Torus(2, 2)
    phi = HeightField(t, [0.0, 1.0, 2.0, 3.0])
    np.testing.assert_array_equal(integrate(grad(phi)).phi, phi.phi)
    assert np.all(integrate(GradientField(t, np.zeros((2, 4)))).phi == 0)


@settings(max_examples=40)
@given(st.sampled_from(SIZES), st.integers(0, 2**32 - 1))
def test_grad_integrate_bijection(size, seed):
    t = Torus(*size)
    rng = np.random.default_rng(seed)
    phi = HeightField.pinned(t, rng.normal(size=t.n_sites))
    eta = grad(phi)
    assert plaquette_defect(eta) < 1e-12
    assert np.abs(winding_sums(t, eta.eta)).max() < 1e-12
    np.testing.assert_allclose(integrate(eta).phi, phi.phi, atol=1e-12)
    np.testing.assert_allclose(grad(integrate(eta)).eta, eta.eta, atol=1e-12)


def test_single_edge_perturbation_defect():
    t = Torus(2, 2)
    eta = grad(HeightField.pinned(t, np.arange(4.0))).eta.copy()
    eta[1, 2] += 0.37
    assert plaquette_defect(GradientField(t, eta)) == pytest.approx(0.37, abs=1e-14)
    with pytest.raises(InconsistencyError, match="plaquette"):
        integrate(GradientField(t, eta))


def test_constant_field_is_plaquette_closed_but_winds():
    t = Torus(2, 5)
    eta = GradientField(t, np.full((2, t.n_sites), 1.5))
    assert plaquette_defect(eta) == 0.0
    np.testing.assert_allclose(winding_sums(t, eta.eta), 7.5)
    with pytest.raises(InconsistencyError, match="winding"):
        integrate(eta)


def test_defect_zero_in_one_dimension():
    t = Torus(1, 4)
    assert plaquette_defect(GradientField(t, np.ones((1, 4)))) == 0.0


def _random_fields(t, rng):
    phi = HeightField.pinned(t, rng.normal(size=t.n_sites))
    kappa = ConductanceField(t, rng.uniform(0.5, 2, size=(t.d, t.n_sites)))
    return [phi, grad(phi), kappa]


@pytest.mark.parametrize("d,L", [(1, 5), (2, 4), (3, 3)])
def test_shift_identities(d, L):
    t = Torus(d, L)
    rng = np.random.default_rng(1)
    e = [t.unit(j) for j in range(d)]
    for f in _random_fields(t, rng):
        attr = {HeightField: "phi", GradientField: "eta", ConductanceField: "kappa"}[type(f)]
        val = lambda g: getattr(g, attr)
        np.testing.assert_array_equal(val(shift(f, np.zeros(d, int))), val(f))
        np.testing.assert_array_equal(val(shift(f, L * e[0])), val(f))
        back = shift(shift(f, e[0] + 2 * e[-1]), -(e[0] + 2 * e[-1]))
        if isinstance(f, HeightField):
            np.testing.assert_allclose(val(back), val(f), atol=1e-14)
        else:
            np.testing.assert_array_equal(val(back), val(f))
        if d > 1:
            np.testing.assert_allclose(
                val(shift(shift(f, e[0]), e[1])), val(shift(f, e[0] + e[1])), atol=1e-14
            )


@settings(max_examples=25)
@given(st.lists(st.integers(-9, 9), min_size=2, max_size=2), st.lists(st.integers(-9, 9), min_size=2, max_size=2))
def test_shift_group_action(x, y):
    t = Torus(2, 4)
    eta = np.random.default_rng(0).normal(size=(2, 16))
    x, y = np.array(x), np.array(y)
    lhs = shift((t, eta), x + y)
    rhs = shift((t, shift((t, eta), x)), y)
    np.testing.assert_array_equal(lhs, rhs)


def test_shift_relabels_sites():
    t = Torus(2, 3)
    h = np.arange(9.0)
    s = shift((t, h), (1, 0))
    # (tau_x h)(y) = h(y + x)
    assert s[t.index((0, 0))] == h[t.index((1, 0))]
    assert s[t.index((2, 1))] == h[t.index((0, 1))]


def test_gradient_of_shift_is_shift_of_gradient():
    t = Torus(2, 4)
    phi = HeightField.pinned(t, np.random.default_rng(3).normal(size=16))
    x = (1, 3)
    np.testing.assert_allclose(grad(shift(phi, x)).eta, shift(grad(phi), x).eta, atol=1e-14)


def test_conductance_symmetric_access():
    t = Torus(2, 3)
    k = np.arange(1.0, 19.0).reshape(2, 9)
    c = ConductanceField(t, k)
    assert c.between((0, 0), (1, 0)) == c.between((1, 0), (0, 0)) == 1.0
    assert c.between((2, 0), (0, 0)) == k[0, t.index((2, 0))]
    assert c.between((0, 2), (0, 0)) == k[1, t.index((0, 2))]
    with pytest.raises(ValueError):
        c.between((0, 0), (1, 1))


def test_conductance_ellipticity():
    t = Torus(1, 3)
    with pytest.raises(ValueError):
        ConductanceField(t, [[1.0, 1e-4, 1.0]])
    with pytest.raises(ValueError):
        ConductanceField(t, [[1.0, 2e3, 1.0]])


def test_height_pinning_enforced():
    with pytest.raises(ValueError):
        HeightField(Torus(1, 3), [1.0, 2.0, 3.0])


def test_binary_roundtrip(tmp_path):
    t = Torus(2, 3)
    rng = np.random.default_rng(5)
    fields = _random_fields(t, rng)
    buf = io.BytesIO()
    write_fields(buf, fields)
    raw = buf.getvalue()
    first_line = raw.split(b"\n", 1)[0]
    assert first_line == b'{"d": 2, "L": 3, "kind": "height"}'
    # little-endian float64 payload right after the header
    payload = np.frombuffer(raw[len(first_line) + 1 : len(first_line) + 1 + 72], dtype="<f8")
    np.testing.assert_array_equal(payload, fields[0].phi)
    buf.seek(0)
    records = list(read_fields(buf))
    assert [h["kind"] for h, _, _ in records] == ["height", "gradient", "conductance"]
    np.testing.assert_array_equal(records[1][2], fields[1].eta)
    save_field(tmp_path / "k.bin", fields[2])
    np.testing.assert_array_equal(load_field(tmp_path / "k.bin").kappa, fields[2].kappa)


def test_edge_layout_is_site_major():
    t = Torus(2, 2)
    eta = GradientField(t, np.array([[0.0, 1, 2, 3], [10, 11, 12, 13]]))
    from gradgibbs.lattice import field_record

    raw = field_record(eta)
    vals = np.frombuffer(raw.split(b"\n", 1)[1], dtype="<f8")
    np.testing.assert_array_equal(vals, [0, 10, 1, 11, 2, 12, 3, 13])


def test_csv_export():
    t = Torus(2, 2)
    text = to_csv(HeightField(t, [0.0, 1.0, 2.0, 3.0]))
    lines = text.strip().splitlines()
    assert lines[0] == "x0,x1,value"
    assert lines[2] == "1,0,1.0"
    text = to_csv(GradientField(t, np.zeros((2, 4))))
    assert text.splitlines()[0] == "x0,x1,dir0,dir1"
