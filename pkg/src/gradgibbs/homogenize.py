"""Shift-covariant edge fields, the corrector and effective diffusivity.

Expectations over the environment law are realized on the torus as averages
over sites (the shift orbit) and over independently sampled environments.

Edge fields use the lattice layout ``u[b, x]`` for the edge ``x -> x + e_b``.
The corrector ``chi_j`` solves ``L_kappa (x_j + chi_j) = 0`` on the universal
cover; ``y_j = x_j + chi_j - chi_j(0)`` is the harmonic coordinate.  The
effective matrix is normalized so that constant conductance ``kappa0`` gives
``q = 2 kappa0 I``, the covariance rate of the variable-speed walk.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError
from .lattice import ConductanceField, Torus, edge_differences, plaquette_sums, winding_sums, write_fields
from .operator import DIRECT_SITE_LIMIT, apply_L, solve_neg_L, solve_neg_L_direct
from .stats import parallel_map

CLOSED_TOL = 1e-9


@dataclass
class VectorField:
    """Edge field ``u[b, x]``: value of the covariant field at site ``x`` in direction ``b``."""

    torus: Torus
    u: np.ndarray
    closed: bool = False

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        if self.u.shape != (self.torus.d, self.torus.n_sites):
            raise ValueError(f"expected shape {(self.torus.d, self.torus.n_sites)}, got {self.u.shape}")
        if not np.all(np.isfinite(self.u)):
            raise ValueError("vector field has non-finite entries")

    @classmethod
    def from_gradient(cls, torus, h):
        """Increments ``h(x + e_b) - h(x)`` of a periodic site function."""
        return cls(torus, edge_differences(torus, h))


def position_field(torus: Torus, j=None) -> VectorField:
    """Increments of ``x_j`` (or of ``x_1 + ... + x_d`` when ``j`` is None) on the cover."""
    u = np.zeros((torus.d, torus.n_sites))
    if j is None:
        u[:] = 1.0
    else:
        u[j] = 1.0
    return VectorField(torus, u)


@dataclass(frozen=True)
class CycleDefect:
    plaquette: float
    winding: np.ndarray

    @property
    def closed(self) -> bool:
        return self.plaquette <= CLOSED_TOL


def cycle_check(u: VectorField) -> CycleDefect:
    """Maximal plaquette sum and per-direction winding sums; marks ``u.closed``."""
    t = u.torus
    sums = plaquette_sums(t, u.u)
    plaq = float(np.abs(sums).max()) if sums.size else 0.0
    report = CycleDefect(plaq, winding_sums(t, u.u))
    u.closed = report.closed
    return report


def divergence(kappa: ConductanceField, u) -> np.ndarray:
    """``sum_b [kappa_(x, x+b) u_b(x) - kappa_(x-b, x) u_b(x-b)]``."""
    t = kappa.torus
    u = u.u if isinstance(u, VectorField) else np.asarray(u, dtype=float)
    flux = kappa.kappa * u
    out = np.zeros(u.shape[:-2] + (t.n_sites,))
    for b in range(t.d):
        out += flux[..., b, :] - flux[..., b, t.backward[b]]
    return out


@dataclass
class Corrector:
    """Periodic correctors ``chi[j]`` (site mean zero) for one environment."""

    kappa: ConductanceField
    chi: np.ndarray
    residual: float = 0.0
    iterations: tuple = ()

    @property
    def torus(self) -> Torus:
        return self.kappa.torus

    def chi_bar(self, j) -> np.ndarray:
        """``chi_j(x) - chi_j(0)``."""
        return self.chi[j] - self.chi[j][0]

    def harmonic_coordinate(self, j, x) -> np.ndarray:
        """``y_j(x) = x_j + chi_j(x) - chi_j(0)`` for unfolded integer coordinates ``x`` (shape ``(..., d)``)."""
        x = np.asarray(x)
        idx = (x % self.torus.L) @ (self.torus.L ** np.arange(self.torus.d))
        return x[..., j] + self.chi_bar(j)[idx]

    def increments(self, j) -> np.ndarray:
        """Edge increments of ``y_j``: ``delta_jb + chi_j(x + e_b) - chi_j(x)``."""
        inc = edge_differences(self.torus, self.chi[j])
        inc[j] += 1.0
        return inc

    def save(self, path):
        with open(path, "wb") as fh:
            write_fields(fh, [(self.torus, c) for c in self.chi])


def corrector(kappa: ConductanceField, tol=1e-10, method="auto") -> Corrector:
    """Solve ``(-L_kappa) chi_j = div(kappa, e_j)`` for every direction ``j``.

    Parameters
    ----------
    method : {"auto", "cg", "direct"}
        ``cg`` uses the preconditioned conjugate gradient of
        :func:`solve_neg_L` with tolerance ``tol``; ``direct`` uses a sparse
        Cholesky factorization shared by all directions.  ``auto`` picks
        ``direct`` up to ``DIRECT_SITE_LIMIT`` sites.
    """
    t = kappa.torus
    if method == "auto":
        method = "direct" if t.n_sites <= DIRECT_SITE_LIMIT else "cg"
    rhs = np.array([divergence(kappa, position_field(t, j)) for j in range(t.d)])
    if method == "direct":
        chi = solve_neg_L_direct(kappa, rhs)
        its = ()
    elif method == "cg":
        sols = [solve_neg_L(kappa, r, tol=tol) for r in rhs]
        chi = np.array([u for u, _ in sols])
        its = tuple(res.iterations for _, res in sols)
    else:
        raise ValueError(f"unknown method {method!r}")
    # L_kappa (x_j + chi_j) = L_kappa chi_j + div_j on the cover
    worst = float(np.abs(apply_L(kappa, chi) + rhs).max())
    return Corrector(kappa, chi, worst, its)


def one_dimensional_corrector(kappa: ConductanceField) -> np.ndarray:
    """Closed form ``chi_bar(x) = (1/C) sum_(n<x) (1/kappa_n - C)`` with ``C`` the ring mean of ``1/kappa``."""
    if kappa.torus.d != 1:
        raise PreconditionError("closed-form corrector is only available in one dimension")
    r = 1 / kappa.kappa[0]
    C = r.mean()
    return np.concatenate([[0.0], np.cumsum(r / C - 1)[:-1]])


@dataclass
class EffectiveMatrix:
    """Symmetric positive-definite ``q`` with per-entry standard errors."""

    q: np.ndarray
    method: str
    se: np.ndarray | None = None
    n_samples: int = 1
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        q = np.atleast_2d(np.asarray(self.q, dtype=float))
        if np.max(np.abs(q - q.T), initial=0.0) > 1e-12 * max(1.0, np.abs(q).max()):
            raise ValueError("effective matrix is not symmetric")
        self.q = 0.5 * (q + q.T)
        if not np.all(np.isfinite(self.q)) or np.linalg.eigvalsh(self.q).min() <= 0:
            raise ValueError("effective matrix is not positive definite")
        if self.se is None:
            self.se = np.full_like(self.q, np.nan)
        self.se = np.asarray(self.se, dtype=float)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "q": self.q.tolist(),
            "se": [[None if not np.isfinite(v) else float(v) for v in row] for row in self.se],
            "n_samples": self.n_samples,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data):
        se = np.array([[np.nan if v is None else v for v in row] for row in data["se"]])
        return cls(np.array(data["q"]), data["method"], se, data.get("n_samples", 1), data.get("notes", {}))


def corrector_energy(cor: Corrector) -> np.ndarray:
    """``2/N sum_x sum_b kappa_b (dy_j)_b (dy_k)_b`` for one environment."""
    t = cor.torus
    inc = np.array([cor.increments(j) for j in range(t.d)])
    k = cor.kappa.kappa
    return 2 * np.einsum("bx,jbx,kbx->jk", k, inc, inc) / t.n_sites


def _solve_energy(kappa):
    return corrector_energy(corrector(kappa))


def effective_matrix_from_corrector(ensemble, workers=1) -> EffectiveMatrix:
    """Average the corrector energy over environments (``ConductanceField`` or solved ``Corrector``)."""
    ensemble = list(ensemble)
    if not ensemble:
        raise PreconditionError("empty environment ensemble")
    solved = [corrector_energy(e) for e in ensemble if isinstance(e, Corrector)]
    raw = [e for e in ensemble if isinstance(e, ConductanceField)]
    if len(solved) + len(raw) != len(ensemble):
        raise PreconditionError("ensemble entries must be conductance fields or correctors")
    qs = np.array(solved + parallel_map(_solve_energy, raw, workers))
    n = len(qs)
    se = qs.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full(qs.shape[1:], np.nan)
    return EffectiveMatrix(qs.mean(axis=0), "corrector", se, n)


def regularized_poisson(u1, epsilon, torus: Torus | None = None, direction=0) -> np.ndarray:
    """Periodic solution of ``(1 + epsilon - T) h = -u1`` with ``T h(x) = h(x + e_direction)``.

    Equivalent to ``h = -sum_(n>=0) T^n u1 / (1 + epsilon)^(n+1)`` summed
    along each shift orbit; computed exactly by FFT along that axis.
    """
    if epsilon <= 0:
        raise PreconditionError("epsilon must be positive")
    u1 = np.asarray(u1, dtype=float)
    if torus is None:
        torus = Torus(1, u1.size)
    g = torus.to_grid(u1)
    L = torus.L
    k = 2 * np.pi * np.fft.fftfreq(L)
    shape = [1] * torus.d
    shape[direction] = L
    symbol = (1 + epsilon - np.exp(1j * k)).reshape(shape)
    h = np.fft.ifft(-np.fft.fft(g, axis=direction) / symbol, axis=direction).real
    return torus.from_grid(h)


def decompose(kappa: ConductanceField, u: VectorField, cor: Corrector | None = None):
    """Split a closed field into a zero-mean gradient part and harmonic-coordinate increments.

    Returns
    -------
    gradient_part : VectorField
        ``u - sum_j lambda_j dy_j``; closed, zero winding, zero mean.
    lam : ndarray
        ``lambda_j`` = site average of ``u_j``.
    """
    if not u.closed and not cycle_check(u).closed:
        raise PreconditionError("decompose needs a plaquette-closed field")
    if cor is None:
        cor = corrector(kappa)
    lam = u.u.mean(axis=1)
    g = u.u.copy()
    for j in range(u.torus.d):
        g -= lam[j] * cor.increments(j)
    return VectorField(u.torus, g, closed=True), lam


def recombine(gradient_part: VectorField, lam, cor: Corrector) -> VectorField:
    u = gradient_part.u.copy()
    for j, l in enumerate(lam):
        u += l * cor.increments(j)
    return VectorField(gradient_part.torus, u)


def tilted_conditional_mean(cor: Corrector, tilt, x) -> float:
    """``tilt . (x + chi_bar(x))`` for unfolded site coordinates ``x``."""
    tilt = np.asarray(tilt, dtype=float)
    x = np.asarray(x)
    return float(sum(tilt[j] * cor.harmonic_coordinate(j, x) for j in range(cor.torus.d)))


def orbit_average(u1, n, torus: Torus | None = None, direction=0) -> np.ndarray:
    """``A_n u(x) = (1/n) sum_(m<n) u(x + m e_direction)``."""
    u1 = np.asarray(u1, dtype=float)
    if torus is None:
        torus = Torus(1, u1.size)
    g = torus.to_grid(u1)
    c = np.cumsum(np.concatenate([g, g], axis=direction), axis=direction)
    c = np.concatenate([np.zeros_like(np.take(c, [0], axis=direction)), c], axis=direction)
    L = torus.L
    if n > L:
        # whole laps contribute the orbit sum
        laps, n_rest = divmod(n, L)
        total = np.take(c, [L], axis=direction)
        part = np.take(c, np.arange(L) + n_rest, axis=direction) - np.take(c, np.arange(L), axis=direction)
        return torus.from_grid((laps * total + part) / n)
    part = np.take(c, np.arange(L) + n, axis=direction) - np.take(c, np.arange(L), axis=direction)
    return torus.from_grid(part / n)
