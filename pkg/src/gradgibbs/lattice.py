"""Periodic lattice geometry and field containers.

Sites of the torus ``(Z/LZ)^d`` are indexed row-major with coordinate 0
fastest: ``index(x) = sum_j x_j L^j``.  Positively oriented edges are
labelled ``(x, j)`` for the edge from ``x`` to ``x + e_j``; edge arrays have
shape ``(d, n_sites)`` so that ``eta[j, x]`` is the value on that edge.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import InconsistencyError, PreconditionError

LOOP_TOL = 1e-8


@dataclass(frozen=True)
class Torus:
    """Periodic cubic lattice of side ``L`` in dimension ``d``."""

    d: int
    L: int

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.L < 2:
            raise ValueError(f"side length must be at least 2, got {self.L}")

    @property
    def shape(self):
        return (self.L,) * self.d

    @property
    def n_sites(self) -> int:
        return self.L**self.d

    @property
    def n_edges(self) -> int:
        return self.d * self.n_sites

    @cached_property
    def coords(self) -> np.ndarray:
        """Integer coordinates, shape ``(n_sites, d)``."""
        idx = np.arange(self.n_sites)
        return np.stack([(idx // self.L**j) % self.L for j in range(self.d)], axis=1)

    @cached_property
    def forward(self) -> np.ndarray:
        """``forward[j, x]`` is the index of ``x + e_j``."""
        return self._neighbors(+1)

    @cached_property
    def backward(self) -> np.ndarray:
        """``backward[j, x]`` is the index of ``x - e_j``."""
        return self._neighbors(-1)

    def _neighbors(self, sign):
        grid = self.to_grid(np.arange(self.n_sites))
        return np.stack(
            [self.from_grid(np.roll(grid, -sign, axis=j)) for j in range(self.d)]
        )

    def index(self, x) -> int:
        x = np.asarray(x, dtype=int) % self.L
        return int(np.dot(x, self.L ** np.arange(self.d)))

    def to_grid(self, values):
        """Reshape a site array (trailing axis of length ``n_sites``) to ``(..., L, ..., L)``."""
        values = np.asarray(values)
        lead = values.shape[:-1]
        # coordinate 0 fastest == Fortran order on the site axes
        grid = values.reshape(lead + self.shape[::-1])
        axes = tuple(range(len(lead))) + tuple(
            len(lead) + self.d - 1 - j for j in range(self.d)
        )
        return grid.transpose(axes)

    def from_grid(self, grid):
        grid = np.asarray(grid)
        nlead = grid.ndim - self.d
        axes = tuple(range(nlead)) + tuple(nlead + self.d - 1 - j for j in range(self.d))
        return np.ascontiguousarray(grid.transpose(axes)).reshape(
            grid.shape[:nlead] + (self.n_sites,)
        )

    def unit(self, j) -> np.ndarray:
        e = np.zeros(self.d, dtype=int)
        e[j] = 1
        return e

    def edge_endpoints(self):
        """Arrays ``(tail, head)`` of shape ``(d, n_sites)``."""
        tail = np.broadcast_to(np.arange(self.n_sites), (self.d, self.n_sites))
        return tail, self.forward


@dataclass
class HeightField:
    """Per-site heights pinned to zero at the origin."""

    torus: Torus
    phi: np.ndarray

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)
        if self.phi.shape != (self.torus.n_sites,):
            raise ValueError(f"expected {self.torus.n_sites} site values, got {self.phi.shape}")
        if self.phi[0] != 0.0:
            raise ValueError("height field must be pinned: phi at the origin is nonzero")

    @classmethod
    def pinned(cls, torus, phi):
        phi = np.asarray(phi, dtype=float)
        return cls(torus, phi - phi[0])

    @classmethod
    def zeros(cls, torus):
        return cls(torus, np.zeros(torus.n_sites))


@dataclass
class GradientField:
    """Per-edge gradient values ``eta[j, x] = phi(x + e_j) - phi(x)``.

    The constructor does not enforce the loop constraints; use
    :meth:`check` or :func:`plaquette_defect`.
    """

    torus: Torus
    eta: np.ndarray

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=float)
        if self.eta.shape != (self.torus.d, self.torus.n_sites):
            raise ValueError(f"expected edge array of shape {(self.torus.d, self.torus.n_sites)}")

    def check(self, tol=1e-10):
        defect = plaquette_defect(self)
        if defect > tol:
            raise InconsistencyError(f"plaquette defect {defect:.3g} exceeds {tol}")
        wind = np.max(np.abs(winding_sums(self.torus, self.eta)))
        if wind > tol:
            raise InconsistencyError(f"winding sum {wind:.3g} exceeds {tol} (nonzero tilt sector)")


@dataclass
class ConductanceField:
    """Per-edge conductances, symmetric by construction (one value per unordered edge)."""

    torus: Torus
    kappa: np.ndarray
    floor: float = 1e-3

    def __post_init__(self):
        self.kappa = np.asarray(self.kappa, dtype=float)
        if self.kappa.shape != (self.torus.d, self.torus.n_sites):
            raise ValueError(f"expected edge array of shape {(self.torus.d, self.torus.n_sites)}")
        lo, hi = self.kappa.min(), self.kappa.max()
        if lo < self.floor or hi > 1 / self.floor:
            raise ValueError(
                f"conductances [{lo:.3g}, {hi:.3g}] violate ellipticity range "
                f"[{self.floor}, {1 / self.floor}]"
            )

    @classmethod
    def constant(cls, torus, value=1.0, floor=1e-3):
        return cls(torus, np.full((torus.d, torus.n_sites), float(value)), floor=floor)

    @property
    def kappa_min(self):
        return float(self.kappa.min())

    @property
    def kappa_max(self):
        return float(self.kappa.max())

    def between(self, x, y) -> float:
        """Conductance of the edge joining neighbouring sites ``x`` and ``y`` (either order)."""
        t = self.torus
        x = np.asarray(x) % t.L
        y = np.asarray(y) % t.L
        diff = (y - x) % t.L
        for j in range(t.d):
            e = t.unit(j)
            if np.array_equal(diff, e):
                return float(self.kappa[j, t.index(x)])
            if np.array_equal(diff, (-e) % t.L):
                return float(self.kappa[j, t.index(y)])
        raise ValueError(f"sites {x} and {y} are not nearest neighbours")

    def site_total(self) -> np.ndarray:
        """``sum_y kappa_xy`` at every site."""
        t = self.torus
        tot = self.kappa.sum(axis=0)
        for j in range(t.d):
            tot = tot + self.kappa[j, t.backward[j]]
        return tot


def grad(phi: HeightField) -> GradientField:
    t = phi.torus
    return GradientField(t, phi.phi[t.forward] - phi.phi[None, :])


def edge_differences(torus: Torus, h):
    """Forward differences ``h(x + e_j) - h(x)`` of a site array (leading batch axes allowed)."""
    h = np.asarray(h)
    return np.stack([h[..., torus.forward[j]] - h for j in range(torus.d)], axis=-2)


def plaquette_sums(torus: Torus, eta) -> np.ndarray:
    """Oriented four-edge sums, shape ``(n_pairs, n_sites)`` over pairs ``i < j``."""
    eta = np.asarray(eta)
    f = torus.forward
    out = []
    for i in range(torus.d):
        for j in range(i + 1, torus.d):
            out.append(eta[i] + eta[j][f[i]] - eta[i][f[j]] - eta[j])
    if not out:
        return np.zeros((0, torus.n_sites))
    return np.array(out)


def plaquette_defect(eta: GradientField) -> float:
    """Largest absolute oriented sum over unit squares (0 in one dimension)."""
    sums = plaquette_sums(eta.torus, eta.eta)
    return float(np.max(np.abs(sums))) if sums.size else 0.0


def winding_sums(torus: Torus, eta) -> np.ndarray:
    """Sums of ``eta_j`` along every line in direction ``j``.

    Returns an array of shape ``(d, L^(d-1))``; lines are labelled by the
    remaining coordinates.
    """
    grid = torus.to_grid(np.asarray(eta))  # (d, L, ..., L)
    return np.stack([grid[j].sum(axis=j).ravel() for j in range(torus.d)])


def integrate(eta: GradientField, tol=LOOP_TOL) -> HeightField:
    """Recover the pinned height field whose gradient is ``eta``."""
    t = eta.torus
    sums = plaquette_sums(t, eta.eta)
    if sums.size:
        k = np.unravel_index(np.argmax(np.abs(sums)), sums.shape)
        worst = abs(sums[k])
        if worst > tol:
            pairs = [(i, j) for i in range(t.d) for j in range(i + 1, t.d)]
            i, j = pairs[k[0]]
            x = tuple(int(c) for c in t.coords[k[1]])
            raise InconsistencyError(
                f"loop violation {worst:.3g} at plaquette x={x}, directions ({i},{j})"
            )
    wind = np.abs(winding_sums(t, eta.eta))
    if wind.max() > tol * max(1, t.L):
        raise InconsistencyError(f"nonzero winding sum {wind.max():.3g}")

    E = t.to_grid(eta.eta)
    phi = np.zeros(t.shape)
    for j in range(t.d):
        # fill the slab {x_{j+1} = ... = x_{d-1} = 0} by summing along axis j
        sl = (slice(None),) * (j + 1) + (0,) * (t.d - j - 1)
        base = (slice(None),) * j + (slice(0, 1),) + (0,) * (t.d - j - 1)
        steps = np.cumsum(E[j][sl], axis=j)
        inc = np.concatenate([np.zeros_like(np.take(steps, [0], axis=j)),
                              np.take(steps, range(t.L - 1), axis=j)], axis=j)
        phi[sl] = phi[base] + inc
    return HeightField(t, t.from_grid(phi))


def _roll_sites(torus, values, x):
    x = np.asarray(x, dtype=int) % torus.L
    grid = torus.to_grid(values)
    nlead = grid.ndim - torus.d
    return torus.from_grid(
        np.roll(grid, tuple(-int(s) for s in x), axis=tuple(nlead + j for j in range(torus.d)))
    )


def shift(field, x):
    """Translate a field by lattice vector ``x``: ``(tau_x f)(y) = f(y + x)``.

    Accepts the field containers of this module as well as bare site arrays
    ``(n_sites,)`` or edge arrays ``(d, n_sites)`` (a torus must then be
    passed as ``field=(torus, array)``).
    """
    if isinstance(field, HeightField):
        return HeightField.pinned(field.torus, _roll_sites(field.torus, field.phi, x))
    if isinstance(field, GradientField):
        return GradientField(field.torus, _roll_sites(field.torus, field.eta, x))
    if isinstance(field, ConductanceField):
        return ConductanceField(field.torus, _roll_sites(field.torus, field.kappa, x), floor=field.floor)
    torus, values = field
    return _roll_sites(torus, values, x)


# --- serialization -------------------------------------------------------

_KINDS = {
    HeightField: ("height", "phi"),
    GradientField: ("gradient", "eta"),
    ConductanceField: ("conductance", "kappa"),
}


def _layout(torus, kind, values):
    # edge arrays are written site-major: (x, j) -> x * d + j
    return values.T.ravel() if values.ndim == 2 else values.ravel()


def field_record(field, kind=None) -> bytes:
    """Encode a field as a JSON header line followed by little-endian float64 values.

    Bare arrays may be passed as ``(torus, array)`` together with ``kind``.
    """
    if isinstance(field, tuple):
        torus, values = field
        values = np.asarray(values, dtype=float)
        if kind is None:
            kind = "site" if values.ndim == 1 else "edge"
    else:
        kind_default, attr = _KINDS[type(field)]
        kind = kind or kind_default
        torus, values = field.torus, getattr(field, attr)
    header = {"d": torus.d, "L": torus.L, "kind": kind}
    if values.ndim == 2:
        header["components"] = values.shape[0]
    payload = np.ascontiguousarray(_layout(torus, kind, values), dtype="<f8").tobytes()
    return (json.dumps(header) + "\n").encode() + payload


def write_fields(fh, fields):
    for f in fields:
        fh.write(field_record(f))


def read_fields(fh):
    """Iterate over records in a binary stream, yielding ``(header, torus, values)``."""
    while True:
        line = fh.readline()
        if not line:
            return
        header = json.loads(line)
        torus = Torus(header["d"], header["L"])
        ncomp = header.get("components")
        n = torus.n_sites * (ncomp or 1)
        raw = fh.read(8 * n)
        if len(raw) != 8 * n:
            raise ValueError("truncated field record")
        values = np.frombuffer(raw, dtype="<f8").astype(float)
        if ncomp:
            values = values.reshape(torus.n_sites, ncomp).T.copy()
        yield header, torus, values


def as_field(header, torus, values):
    """Rebuild a container from a decoded record (bare arrays are returned as is)."""
    kind = header["kind"]
    if kind == "height":
        return HeightField(torus, values)
    if kind == "gradient":
        return GradientField(torus, values)
    if kind == "conductance":
        return ConductanceField(torus, values, floor=min(1e-3, float(values.min())))
    return values


def save_field(path, field, kind=None):
    with open(path, "wb") as fh:
        fh.write(field_record(field, kind))


def load_field(path):
    with open(path, "rb") as fh:
        header, torus, values = next(read_fields(fh))
    return as_field(header, torus, values)


def to_csv(field, fh=None) -> str:
    """CSV with one row per site: coordinates then value column(s)."""
    if isinstance(field, tuple):
        torus, values = field
        values = np.asarray(values)
    else:
        _, attr = _KINDS[type(field)]
        torus, values = field.torus, getattr(field, attr)
    buf = fh if fh is not None else io.StringIO()
    w = csv.writer(buf)
    coords = [f"x{j}" for j in range(torus.d)]
    if values.ndim == 1:
        w.writerow(coords + ["value"])
        cols = values[None, :]
    else:
        w.writerow(coords + [f"dir{j}" for j in range(values.shape[0])])
        cols = values
    for s in range(torus.n_sites):
        w.writerow(list(torus.coords[s]) + [repr(float(v)) for v in cols[:, s]])
    return buf.getvalue() if fh is None else ""


def require_same_torus(a: Torus, b: Torus):
    if a != b:
        raise PreconditionError(f"torus mismatch: {a} vs {b}")
