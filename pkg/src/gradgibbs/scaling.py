"""Test functions, H-norms and the rescaled field functional.

A test function is ``f = Laplacian(g)`` for a smooth elliptical bump
``g(x) = A psi((x - c)^T M (x - c))`` with ``psi(s) = exp(-1/(1 - s))`` on
``s < 1``.  Its lattice version at scale ``eps`` is

    f_eps(x) = eps^(d/2+1) * integral over the unit cell of f(eps z) dz,

placed on a torus whose physical extent is ``[-L eps/2, L eps/2)^d``, and
``phi_eps(f) = sum_x f_eps(x) phi_x``.  The continuum limit of
``E exp(i phi_eps(f))`` is ``exp(-G/2)`` with ``G = (f, (-Q)^(-1) f)`` and
``Q = 1/2 sum_ij q_ij d_i d_j``.

All continuum quantities are Fourier integrals of ``|k|^4 |g^(k)|^2`` against
a kernel; substituting ``k = M^(1/2) p`` reduces them to the radial Fourier
transform of ``psi(|y|^2)`` on the unit ball and an angular quadrature.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import j0

from .errors import NumericalError, PreconditionError, ResolutionError
from .homogenize import EffectiveMatrix
from .lattice import HeightField, Torus
from .operator import DIRECT_SITE_LIMIT, apply_L_array, chebyshev_exp, solve_neg_L, solve_neg_L_direct, spectral_bound
from .sampler import ChainConfig, run_chain_states
from .stats import batch_means, integrated_autocorrelation_time

QUAD_RTOL = 1e-6
ZERO_SUM_RTOL = 1e-6
RADIAL_CUTOFF = 900.0


@dataclass(frozen=True)
class TestFunctionSpec:
    """``f = Laplacian(g)`` for an elliptical bump ``g``.

    Parameters
    ----------
    d : int
        Dimension.
    radii : tuple
        Semi-axes of the support ellipsoid (all equal for a radial bump).
    theta : float
        Rotation of the principal axes (two dimensions only).
    amplitude : float
        ``A`` in ``g = A psi(...)``.
    center : tuple
        Center ``c``; defaults to the origin.
    """

    __test__ = False

    d: int
    radii: tuple
    theta: float = 0.0
    amplitude: float = 1.0
    center: tuple | None = None

    def __post_init__(self):
        radii = tuple(float(r) for r in np.broadcast_to(self.radii, (self.d,)))
        object.__setattr__(self, "radii", radii)
        c = (0.0,) * self.d if self.center is None else tuple(float(v) for v in self.center)
        object.__setattr__(self, "center", c)
        if self.d not in (1, 2, 3):
            raise ValueError("dimension must be 1, 2 or 3")
        if min(radii) <= 0:
            raise ValueError("radii must be positive")
        if len(c) != self.d:
            raise ValueError("center has the wrong dimension")
        if self.theta and self.d != 2:
            raise ValueError("rotation angle is only supported in two dimensions")

    @classmethod
    def radial(cls, d, radius=1.0, amplitude=1.0, center=None):
        return cls(d, (radius,) * d, 0.0, amplitude, center)

    @property
    def rotation(self) -> np.ndarray:
        if self.d != 2:
            return np.eye(self.d)
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    @property
    def matrix(self) -> np.ndarray:
        """``M = R diag(1/r^2) R^T``; the support is ``{(x-c)^T M (x-c) < 1}``."""
        R = self.rotation
        return R @ np.diag(1 / np.array(self.radii) ** 2) @ R.T

    @property
    def sqrt_matrix(self) -> np.ndarray:
        R = self.rotation
        return R @ np.diag(1 / np.array(self.radii)) @ R.T

    @property
    def support_radius(self) -> float:
        return max(self.radii)

    def rescaled(self, eps) -> "TestFunctionSpec":
        """The bump whose Laplacian is ``eps^(d/2+1) f(eps x)``."""
        return TestFunctionSpec(
            self.d,
            tuple(r / eps for r in self.radii),
            self.theta,
            self.amplitude * eps ** (self.d / 2 - 1),
            tuple(v / eps for v in self.center),
        )

    def with_amplitude(self, amplitude) -> "TestFunctionSpec":
        return TestFunctionSpec(self.d, self.radii, self.theta, amplitude, self.center)

    def _s(self, x):
        y = np.asarray(x, dtype=float) - np.array(self.center)
        My = y @ self.matrix
        return y, My, np.einsum("...i,...i->...", y, My)

    def g(self, x):
        _, _, s = self._s(x)
        out = np.zeros(s.shape)
        inside = s < 1
        out[inside] = self.amplitude * np.exp(-1 / (1 - s[inside]))
        return out

    def f(self, x):
        """Closed-form ``Laplacian(g)``: ``A [psi''(s) |2 M y|^2 + 2 psi'(s) tr M]``."""
        _, My, s = self._s(x)
        out = np.zeros(s.shape)
        inside = s < 1
        si = s[inside]
        u = 1 / (1 - si)
        psi = np.exp(-u)
        d1 = -psi * u**2
        d2 = psi * (u**4 - 2 * u**3)
        grad_sq = 4 * np.einsum("...i,...i->...", My[inside], My[inside])
        out[inside] = self.amplitude * (d2 * grad_sq + 2 * d1 * np.trace(self.matrix))
        return out

    def to_dict(self) -> dict:
        return asdict(self)


# --- continuum Fourier quadrature --------------------------------------------------


def _gauss_panels(a, b, panels, order, edges=None):
    x, w = np.polynomial.legendre.leggauss(order)
    if edges is None:
        edges = np.linspace(a, b, panels + 1)
    h = np.diff(edges) / 2
    mid = (edges[:-1] + edges[1:]) / 2
    return (mid[:, None] + h[:, None] * x).ravel(), (h[:, None] * w).ravel()


@lru_cache(maxsize=32)
def _bump_transform(d, panels, inner):
    """Radial nodes, weights and ``|Psi^(rho)|^2`` for ``Psi(y) = psi(|y|^2)`` on the unit ball."""
    # geometric panels near the origin resolve kernels concentrated at small |k|
    edges = np.concatenate([[0.0], np.geomspace(1e-6, 1.0, panels // 10 + 1), np.linspace(1.0, RADIAL_CUTOFF, panels + 1)[1:]])
    rho, wr = _gauss_panels(0.0, RADIAL_CUTOFF, panels, 16, edges)
    r, w = _gauss_panels(0.0, 1.0, inner // 20, 20)
    psi = np.exp(-1 / (1 - r**2))
    out = np.empty(rho.size)
    for lo in range(0, rho.size, 512):
        p = rho[lo : lo + 512, None]
        if d == 1:
            kern = 2 * np.cos(p * r)
        elif d == 2:
            kern = 2 * np.pi * j0(p * r) * r
        else:
            kern = 4 * np.pi * r**2 * np.sinc(p * r / np.pi)
        out[lo : lo + 512] = kern @ (w * psi)
    return rho, wr, out**2


@lru_cache(maxsize=16)
def _sphere_rule(d, n):
    """Quadrature nodes ``(m, d)`` and weights on the unit sphere."""
    if d == 1:
        return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    if d == 2:
        th = 2 * np.pi * np.arange(n) / n
        return np.stack([np.cos(th), np.sin(th)], axis=1), np.full(n, 2 * np.pi / n)
    u, wu = np.polynomial.legendre.leggauss(n // 2)
    ph = 2 * np.pi * np.arange(n) / n
    U, P = np.meshgrid(u, ph, indexing="ij")
    s = np.sqrt(1 - U**2)
    nodes = np.stack([s * np.cos(P), s * np.sin(P), U], axis=-1).reshape(-1, 3)
    weights = (wu[:, None] * np.full(n, 2 * np.pi / n)[None, :]).ravel()
    return nodes, weights


def _spectral_integral_at(spec: TestFunctionSpec, kernel, panels, inner, n_ang):
    rho, wr, psi2 = _bump_transform(spec.d, panels, inner)
    omega, wo = _sphere_rule(spec.d, n_ang)
    d = spec.d
    Mh = spec.sqrt_matrix
    dirs = omega @ Mh  # k / rho, shape (m, d)
    quad = np.einsum("mi,ij,mj->m", omega, spec.matrix, omega)  # |k|^2 / rho^2
    total = 0.0
    for lo in range(0, rho.size, 256):
        r = rho[lo : lo + 256, None]
        k = r[..., None] * dirs[None]
        ksq = r**2 * quad[None]
        vals = kernel(k, ksq)
        radial = wr[lo : lo + 256, None] * psi2[lo : lo + 256, None] * r ** (d - 1) * ksq**2
        total += float(np.sum(radial * vals * wo[None]))
    scale = spec.amplitude**2 * np.prod(spec.radii) / (2 * np.pi) ** d
    return scale * total


def spectral_integral(spec: TestFunctionSpec, kernel) -> float:
    """``(2 pi)^-d  int |f^(k)|^2 kernel(k) dk`` with refinement-based error control.

    ``kernel(k, |k|^2)`` receives wavevectors of shape ``(..., d)``.
    """
    n_ang = 256 if spec.d == 2 else 32
    coarse = _spectral_integral_at(spec, kernel, 300, 800, n_ang)
    fine = _spectral_integral_at(spec, kernel, 600, 1600, 2 * n_ang)
    err = abs(fine - coarse) / max(abs(fine), 1e-300)
    if err > QUAD_RTOL:
        raise NumericalError(f"Fourier quadrature did not converge (relative change {err:.2e})")
    return fine


def l2_norm_sq(spec: TestFunctionSpec) -> float:
    """``(f, f)``."""
    return spectral_integral(spec, lambda k, ksq: np.ones_like(ksq))


def inverse_laplacian_form(spec: TestFunctionSpec) -> float:
    """``(f, (-Laplacian)^(-1) f)``."""
    return spectral_integral(spec, lambda k, ksq: 1 / ksq)


def h_norm_sq(spec: TestFunctionSpec) -> float:
    return l2_norm_sq(spec) + inverse_laplacian_form(spec)


def h_norm(spec: TestFunctionSpec | None) -> float:
    """``[(f, f) + (f, (-Laplacian)^(-1) f)]^(1/2)``; ``None`` or zero amplitude give 0."""
    if spec is None or spec.amplitude == 0:
        return 0.0
    return math.sqrt(h_norm_sq(spec))


def _q_matrix(q):
    if isinstance(q, EffectiveMatrix):
        q = q.q
    return np.atleast_2d(np.asarray(q, dtype=float))


def inverse_Q_form(spec: TestFunctionSpec, q) -> float:
    """``G_Q(f) = (f, (-Q)^(-1) f)`` with symbol ``-Q(k) = k^T q k / 2``."""
    q = _q_matrix(q)
    return spectral_integral(spec, lambda k, ksq: 2 / np.einsum("...i,ij,...j->...", k, q, k))


def heat_pair(spec: TestFunctionSpec, q, t) -> float:
    """``(f, exp(t Q) f)``."""
    q = _q_matrix(q)
    return spectral_integral(spec, lambda k, ksq: np.exp(-0.5 * t * np.einsum("...i,ij,...j->...", k, q, k)))


def normalize_amplitude(spec: TestFunctionSpec, target, q) -> TestFunctionSpec:
    """Rescale ``A`` so that ``G_Q(f) = target``."""
    g = inverse_Q_form(spec.with_amplitude(1.0), q)
    return spec.with_amplitude(math.sqrt(target / g))


# --- lattice discretization ----------------------------------------------------------


@dataclass
class DiscretizedTestFunction:
    """Cell-integrated ``f_eps`` on a torus, summing to zero exactly."""

    torus: Torus
    epsilon: float
    values: np.ndarray
    correction: float
    spec: TestFunctionSpec
    order: int = 3

    @property
    def l1(self) -> float:
        return float(np.abs(self.values).sum())


def _cell_integrals(spec, torus, eps, order, sub):
    """Composite Gauss rule with ``sub^d`` subcells of ``order^d`` points per unit cell.

    Only cells meeting the bounding box of the support are evaluated.
    """
    x, w = np.polynomial.legendre.leggauss(order)
    x = ((np.arange(sub)[:, None] + (x[None] + 1) / 2) / sub).ravel()
    w = np.tile(w / (2 * sub), sub)
    d = torus.d
    c = np.array(spec.center)
    R = spec.support_radius
    lo = np.floor((c - R) / eps + torus.L / 2).astype(int)
    hi = np.floor((c + R) / eps + torus.L / 2).astype(int)
    grids = np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(lo, hi)], indexing="ij")
    cells = np.stack([g.ravel() for g in grids], axis=1)
    base = cells - torus.L / 2
    acc = np.zeros(len(cells))
    for idx in np.ndindex(*(len(x),) * d):
        node = x[list(idx)]
        acc += np.prod(w[list(idx)]) * spec.f(eps * (base + node))
    sites = (cells * torus.L ** np.arange(d)).sum(axis=1)
    out = np.zeros(torus.n_sites)
    out[sites] = eps ** (d / 2 + 1) * acc
    return out


def discretize(spec: TestFunctionSpec, torus: Torus, epsilon: float) -> DiscretizedTestFunction:
    """Unit-cell Gauss quadrature of ``f_eps`` followed by exact mean subtraction.

    The rule starts at 3 Gauss points per axis and is refined (more points,
    then subcells) until the mean-subtraction correction is at most ``1e-6``
    of the l1 norm.

    Raises
    ------
    ResolutionError
        If the support of ``f`` does not fit inside the physical torus.
    """
    if spec.d != torus.d:
        raise PreconditionError("test function and torus dimensions differ")
    half = torus.L * epsilon / 2
    c = np.array(spec.center)
    R = spec.support_radius
    if np.any(c - R < -half) or np.any(c + R >= half):
        raise ResolutionError(
            f"support of radius {R:g} around {tuple(c)} does not fit in [-{half:g}, {half:g}); "
            "use a larger torus or a larger epsilon"
        )
    for order, sub in ((3, 1), (5, 1), (5, 2), (5, 4), (5, 8), (5, 16)):
        vals = _cell_integrals(spec, torus, epsilon, order, sub)
        l1 = np.abs(vals).sum()
        total = vals.sum()
        if abs(total) <= ZERO_SUM_RTOL * l1:
            break
    else:
        raise NumericalError(f"cell quadrature leaves a zero-sum defect {abs(total) / l1:.2e}")
    vals = vals - total / torus.n_sites
    return DiscretizedTestFunction(torus, epsilon, vals, float(abs(total)), spec, order * sub)


def phi_pairing(field, f: DiscretizedTestFunction):
    """``sum_x f_eps(x) phi_x``; accepts a ``HeightField`` or site arrays with leading batch axes."""
    if isinstance(field, HeightField):
        if field.torus != f.torus:
            raise PreconditionError(f"torus mismatch: {field.torus} vs {f.torus}")
        values = field.phi
    else:
        values = np.asarray(field, dtype=float)
        if values.shape[-1] != f.torus.n_sites:
            raise PreconditionError("site array does not match the test function's torus")
    return values @ f.values


# --- scans and the characteristic-functional test --------------------------------------


@dataclass
class FormScanRow:
    epsilon: float
    mean: float
    sd: float
    n_env: int
    h_norm_sq: float
    max_ratio: float
    target: float


def quadratic_form_limit_scan(envs, spec: TestFunctionSpec, epsilons, q=None, tol=1e-10) -> list:
    """``(f_eps, (-L_kappa)^(-1) f_eps)`` across environments for each ``eps``.

    Each row carries the mean, the SD across environments, ``||f_eps||_H^2``
    and the largest observed ratio form / ``||f_eps||_H^2``.  ``target`` is
    ``G_Q(f)`` when ``q`` is given.
    """
    envs = list(envs)
    torus = envs[0].torus
    target = inverse_Q_form(spec, q) if q is not None else float("nan")
    base_l2 = l2_norm_sq(spec)
    base_inv = inverse_laplacian_form(spec)
    rows = []
    for eps in epsilons:
        fe = discretize(spec, torus, eps)
        forms = np.array([_form(k, fe.values, tol) for k in envs])
        hsq = eps**2 * base_l2 + base_inv
        rows.append(
            FormScanRow(
                float(eps), float(forms.mean()),
                float(forms.std(ddof=1)) if len(forms) > 1 else 0.0,
                len(forms), float(hsq), float(forms.max() / hsq), float(target),
            )
        )
    return rows


def _form(kappa, f, tol):
    if kappa.torus.n_sites <= DIRECT_SITE_LIMIT:
        return float(f @ solve_neg_L_direct(kappa, f))
    return solve_neg_L(kappa, f, tol=tol)[1].value


@dataclass
class GffReport:
    """Characteristic-functional comparison ``E exp(i phi_eps(f))`` vs ``exp(-G/2)``."""

    epsilon: float
    n_samples: int
    re: float
    im: float
    re_se: float
    im_se: float
    target: float
    g_form: float
    tau_int: float
    q: list
    allowance: float = 0.05

    @property
    def discrepancy(self) -> float:
        return abs(self.re - self.target)

    @property
    def passed(self) -> bool:
        return self.discrepancy <= 3 * self.re_se + self.allowance and abs(self.im) <= 3 * self.im_se

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(discrepancy=self.discrepancy, passed=self.passed)
        return out


def characteristic_estimate(values, n_batches=20):
    """Mean of ``exp(i v)`` with batch-means standard errors for both parts."""
    v = np.asarray(values, dtype=float)
    re, re_se = batch_means(np.cos(v), n_batches)
    im, im_se = batch_means(np.sin(v), n_batches)
    return float(re), float(im), float(re_se), float(im_se)


def gff_limit_test(config: ChainConfig, spec: TestFunctionSpec, epsilon: float, n_samples: int, q, allowance=0.05, state=None) -> GffReport:
    """Run the chain and compare the empirical characteristic functional with the GFF prediction."""
    fe = discretize(spec, config.torus, epsilon)
    vals = np.array([phi_pairing(s.phi, fe) for s in run_chain_states(config, state, n_samples)])
    return gff_report_from_values(vals, spec, epsilon, q, allowance)


def gff_report_from_values(vals, spec, epsilon, q, allowance=0.05) -> GffReport:
    q = _q_matrix(q)
    G = inverse_Q_form(spec, q)
    re, im, re_se, im_se = characteristic_estimate(vals)
    tau = integrated_autocorrelation_time(np.cos(vals)) if len(vals) >= 8 else float("nan")
    return GffReport(float(epsilon), len(vals), re, im, re_se, im_se, math.exp(-G / 2), G, tau, q.tolist(), allowance)


@dataclass
class SemigroupRow:
    epsilon: float
    t: float
    lattice_mean: float
    lattice_sd: float
    target: float

    @property
    def theta(self) -> float:
        return self.lattice_mean - self.target


def semigroup_convergence_scan(envs, spec: TestFunctionSpec, times, epsilons, q) -> list:
    """``Theta_eps(t) = eps^-2 (f_eps, exp(t eps^-2 L) f_eps) - (f, exp(tQ) f)`` per ``(eps, t)``."""
    envs = list(envs)
    torus = envs[0].torus
    k = np.stack([e.kappa for e in envs])
    lam = spectral_bound(k)
    times = np.sort(np.asarray(times, dtype=float))
    targets = [heat_pair(spec, q, t) for t in times]
    rows = []
    for eps in epsilons:
        fe = discretize(spec, torus, eps)
        u = np.broadcast_to(fe.values, (len(envs), torus.n_sites)).copy()
        s_prev = 0.0
        for t, target in zip(times, targets):
            s = t / eps**2
            u = chebyshev_exp(lambda v: apply_L_array(torus, k, v), lam, u, s - s_prev)
            s_prev = s
            pairs = (u @ fe.values) / eps**2
            rows.append(
                SemigroupRow(float(eps), float(t), float(pairs.mean()),
                             float(pairs.std(ddof=1)) if len(envs) > 1 else 0.0, float(target))
            )
    return rows


# --- report export ----------------------------------------------------------------------


def rows_to_csv(rows, fh=None) -> str:
    """CSV table of dataclass rows (derived properties such as ``theta`` included)."""
    buf = fh if fh is not None else io.StringIO()
    rows = list(rows)
    if rows:
        data = [_row_dict(r) for r in rows]
        w = csv.DictWriter(buf, fieldnames=list(data[0]))
        w.writeheader()
        w.writerows(data)
    return buf.getvalue() if fh is None else ""


def _row_dict(row) -> dict:
    out = asdict(row)
    if isinstance(row, SemigroupRow):
        out["theta"] = row.theta
    return out


def report_json(payload: dict) -> str:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if hasattr(o, "to_dict"):
            return o.to_dict()
        if hasattr(o, "__dataclass_fields__"):
            return _row_dict(o)
        raise TypeError(f"cannot serialize {type(o).__name__}")

    return json.dumps(payload, indent=2, default=default)
