"""The conductance operator ``(L_kappa f)(x) = sum_y kappa_xy (f(y) - f(x))``.

Application, inverse quadratic forms on the mean-zero subspace, the heat
semigroup ``exp(t L_kappa)``, and the Fourier diagonalization of the
homogeneous lattice Laplacian.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import ive

from .errors import ConvergenceError, NumericalError, PreconditionError
from .lattice import ConductanceField, Torus

MEAN_ZERO_TOL = 1e-9
REPROJECT_EVERY = 50
RK4_BUDGET = 20_000
DENSE_SITE_LIMIT = 400
DIRECT_SITE_LIMIT = 200_000

try:  # optional CHOLMOD backend
    from sksparse.cholmod import analyze as _cholmod_analyze
except ImportError:  # pragma: no cover - depends on the environment
    _cholmod_analyze = None


@dataclass(frozen=True)
class QuadraticFormResult:
    """``value = (f, (-L_kappa)^{-1} f)`` plus solver diagnostics."""

    value: float
    residual_norm: float
    iterations: int


def apply_L(kappa: ConductanceField, f):
    """Apply ``L_kappa`` to a site array (leading batch axes allowed)."""
    return apply_L_array(kappa.torus, kappa.kappa, f)


def apply_L_array(torus: Torus, k, f):
    """``L_kappa f`` for a raw conductance array ``k`` of shape ``(..., d, n_sites)``.

    Leading axes of ``k`` and ``f`` broadcast, so a stack of environments
    can act on a matching stack of site functions.
    """
    f = np.asarray(f, dtype=float)
    k = np.asarray(k, dtype=float)
    out = np.zeros(np.broadcast_shapes(f.shape, k.shape[:-2] + (torus.n_sites,)))
    for j in range(torus.d):
        flux = k[..., j, :] * (f[..., torus.forward[j]] - f)
        out += flux
        # incoming edge from x - e_j carries the same conductance
        out -= flux[..., torus.backward[j]]
    return out


@lru_cache(maxsize=16)
def incidence(torus: Torus) -> sp.csr_matrix:
    """Signed edge-site incidence ``B`` with ``(B f)_(j,x) = f(x + e_j) - f(x)``.

    Rows are ordered like the flattened ``(d, n_sites)`` edge arrays.
    """
    n, m = torus.n_sites, torus.n_edges
    rows = np.arange(m)
    tail = np.tile(np.arange(n), torus.d)
    head = torus.forward.ravel()
    data = np.concatenate([-np.ones(m), np.ones(m)])
    B = sp.csr_matrix((data, (np.concatenate([rows, rows]), np.concatenate([tail, head]))), shape=(m, n))
    B.sum_duplicates()
    return B


def neg_L_matrix(kappa: ConductanceField) -> sp.csc_matrix:
    """Sparse matrix of ``-L_kappa`` (symmetric positive semidefinite)."""
    B = incidence(kappa.torus)
    return (B.T @ sp.diags(kappa.kappa.ravel()) @ B).tocsc()


def _check_mean_zero(f):
    scale = np.abs(f).sum()
    if abs(f.sum()) > MEAN_ZERO_TOL * max(scale, np.finfo(float).tiny):
        raise PreconditionError(
            f"right-hand side must sum to zero (sum={f.sum():.3g}, l1 norm={scale:.3g})"
        )


def solve_neg_L(kappa: ConductanceField, f, tol=1e-10, maxiter=None):
    """Solve ``(-L_kappa) u = f`` on the mean-zero subspace.

    Jacobi-preconditioned conjugate gradient; the iterate is re-projected to
    mean zero every 50 iterations.

    Returns
    -------
    u : ndarray
        Mean-zero solution.
    result : QuadraticFormResult
        ``value = sum_x f(x) u(x)``, relative residual and iteration count.
    """
    f = np.asarray(f, dtype=float)
    _check_mean_zero(f)
    fnorm = np.linalg.norm(f)
    if fnorm == 0:
        return np.zeros_like(f), QuadraticFormResult(0.0, 0.0, 0)
    if maxiter is None:
        maxiter = 20 * kappa.torus.n_sites
    diag = kappa.site_total()

    def A(v):
        return -apply_L(kappa, v)

    x = np.zeros_like(f)
    r = f.copy()
    z = r / diag
    p = z.copy()
    rz = r @ z
    best = 1.0
    res = 1.0
    for it in range(1, maxiter + 1):
        Ap = A(p)
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if it % REPROJECT_EVERY == 0:
            x -= x.mean()
            r = f - A(x)
        res = np.linalg.norm(r) / fnorm
        best = min(best, res)
        if res <= tol:
            break
        z = r / diag
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    else:
        raise ConvergenceError(
            f"CG did not reach tol={tol:g} in {maxiter} iterations (best {best:.3g})",
            best_residual=best,
            iterations=maxiter,
        )
    x -= x.mean()
    res = np.linalg.norm(f - A(x)) / fnorm
    return x, QuadraticFormResult(float(f @ x), float(res), it)


def quadratic_form(kappa, f, tol=1e-10) -> float:
    """``(f, (-L_kappa)^{-1} f)``."""
    return solve_neg_L(kappa, f, tol=tol)[1].value


class PinnedSolver:
    """Sparse Cholesky of ``-L_kappa`` with the origin row and column removed.

    The sparsity pattern depends only on the torus, so the symbolic analysis
    is done once and every new ``kappa`` only refills the numeric values.
    The last numeric factorization is reused while ``kappa`` is unchanged.
    """

    def __init__(self, torus: Torus, backend=None):
        self.torus = torus
        n = torus.n_sites
        tail, head = torus.edge_endpoints()
        tail, head = tail.ravel(), head.ravel()
        m = tail.size
        rows = np.concatenate([tail, head, tail, head])
        cols = np.concatenate([tail, head, head, tail])
        self._sign = np.concatenate([np.ones(2 * m), -np.ones(2 * m)])
        self._edge = np.tile(np.arange(m), 4)
        keep = (rows > 0) & (cols > 0)
        rows, cols = rows[keep] - 1, cols[keep] - 1
        self._sign, self._edge = self._sign[keep], self._edge[keep]
        pattern = sp.csc_matrix((np.ones(rows.size), (rows, cols)), shape=(n - 1, n - 1))
        pattern.sum_duplicates()
        pattern.sort_indices()
        self._pattern = pattern
        # position of every contribution inside the canonical CSC data array
        keys = pattern.indices.astype(np.int64) + (n - 1) * np.repeat(
            np.arange(n - 1, dtype=np.int64), np.diff(pattern.indptr)
        )
        self._pos = np.searchsorted(keys, rows.astype(np.int64) + (n - 1) * cols)
        if backend is None:
            if n <= DENSE_SITE_LIMIT:
                backend = "dense"
            elif _cholmod_analyze is not None:
                backend = "cholmod"
            else:
                backend = "splu"
        self.backend = backend
        self._symbolic = None
        self._factor = None
        self._key = None

    def matrix(self, kappa) -> sp.csc_matrix:
        k = np.asarray(kappa, dtype=float).ravel()
        data = np.bincount(self._pos, weights=self._sign * k[self._edge], minlength=self._pattern.nnz)
        return sp.csc_matrix((data, self._pattern.indices, self._pattern.indptr), shape=self._pattern.shape)

    def factor(self, kappa: ConductanceField):
        key = hashlib.blake2b(np.ascontiguousarray(kappa.kappa).tobytes(), digest_size=16).digest()
        if key == self._key:
            return
        K = self.matrix(kappa.kappa)
        try:
            if self.backend == "dense":
                self._factor = sla.cho_factor(K.toarray(), lower=True)
            elif self.backend == "cholmod":
                if self._symbolic is None:
                    self._symbolic = _cholmod_analyze(K)
                self._symbolic.cholesky_inplace(K)
                self._factor = self._symbolic
            elif self.backend == "splu":
                self._factor = spla.splu(K, permc_spec="MMD_AT_PLUS_A")
            else:
                raise ValueError(f"unknown backend {self.backend!r}")
        except (np.linalg.LinAlgError, RuntimeError, ValueError) as exc:
            self._key = None
            raise NumericalError(f"factorization of the pinned operator failed: {exc}") from exc
        self._key = key

    def solve(self, rhs):
        if self.backend == "dense":
            return sla.cho_solve(self._factor, rhs)
        if self.backend == "cholmod":
            return self._factor.solve_A(rhs)
        return self._factor.solve(rhs)

    def covariance_solve(self, kappa: ConductanceField, f):
        """``K_p^{-1} f[1:]`` padded with the pinned zero (``f`` site array(s), trailing axis)."""
        self.factor(kappa)
        f = np.asarray(f, dtype=float)
        rhs = f[..., 1:].T
        out = np.zeros(f.shape)
        out[..., 1:] = np.asarray(self.solve(np.ascontiguousarray(rhs))).T
        return out


@lru_cache(maxsize=8)
def pinned_solver(torus: Torus) -> PinnedSolver:
    return PinnedSolver(torus)


def solve_neg_L_direct(kappa: ConductanceField, f):
    """Mean-zero solution of ``(-L_kappa) u = f`` by sparse Cholesky (``f`` may carry leading batch axes)."""
    f = np.asarray(f, dtype=float)
    for row in f.reshape(-1, f.shape[-1]):
        _check_mean_zero(row)
    u = pinned_solver(kappa.torus).covariance_solve(kappa, f)
    return u - u.mean(axis=-1, keepdims=True)


# --- heat semigroup ------------------------------------------------------


def rk4_step_size(kappa: ConductanceField) -> float:
    return 0.2 / (2 * kappa.torus.d * kappa.kappa_max)


def _rk4_segment(kappa, u, dt, h, monitor):
    n = max(1, math.ceil(dt / h - 1e-12))
    h = dt / n
    for _ in range(n):
        k1 = apply_L(kappa, u)
        k2 = apply_L(kappa, u + 0.5 * h * k1)
        k3 = apply_L(kappa, u + 0.5 * h * k2)
        k4 = apply_L(kappa, u + h * k3)
        u = u + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        if monitor is not None and not monitor(u):
            return None
    return u


def chebyshev_exp(apply, lam, u, dt, tol=1e-15):
    """``exp(dt A) u`` for a negative semidefinite ``A`` with spectrum in ``[-lam, 0]``.

    Uses ``exp(dt A) = sum_k c_k T_k(I + 2A/lam)`` with
    ``c_k = (2 - delta_k0) exp(-z) I_k(z)`` and ``z = dt lam / 2``.
    """
    z = 0.5 * dt * lam
    if z == 0:
        return np.array(u, dtype=float, copy=True)

    def X(v):
        return v + (2 / lam) * apply(v)

    t_prev, t_cur = u, X(u)
    out = ive(0, z) * t_prev + 2 * ive(1, z) * t_cur
    k = 1
    while True:
        k += 1
        c = 2 * ive(k, z)
        t_prev, t_cur = t_cur, 2 * X(t_cur) - t_prev
        out += c * t_cur
        if k > z and c < tol:
            return out


def spectral_bound(kappa_array) -> float:
    """``4 d kappa_max``, an upper bound on the spectrum of ``-L_kappa`` for arrays ``(..., d, n_sites)``."""
    k = np.asarray(kappa_array)
    return float(4 * k.shape[-2] * k.max())


def _chebyshev_segment(kappa, u, dt, tol=1e-15):
    lam = 2 * kappa.site_total().max()
    return chebyshev_exp(lambda v: apply_L(kappa, v), lam, u, dt, tol)


def evolve(kappa: ConductanceField, u0, times, method="auto", monitor_factory=None):
    """Solve ``du/ds = L_kappa u`` and return ``u`` at each of ``times`` (sorted, >= 0).

    Parameters
    ----------
    method : {"auto", "rk4", "chebyshev"}
        ``rk4`` uses explicit RK4 with step ``0.2 / (2 d kappa_max)``, halved
        whenever ``monitor_factory`` reports a violation.  ``chebyshev`` uses
        the Bessel-coefficient expansion of ``exp(t L)``, which is exact to
        round-off for any horizon.  ``auto`` picks RK4 unless it would need
        more than ``RK4_BUDGET`` steps.
    monitor_factory : callable, optional
        ``monitor_factory()`` returns a fresh per-step predicate ``ok(u)``
        used to detect RK4 instability.
    """
    times = np.asarray(times, dtype=float)
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ValueError("times must be nonnegative and sorted")
    u0 = np.asarray(u0, dtype=float)
    h = rk4_step_size(kappa)
    if method == "auto":
        method = "rk4" if (times[-1] if times.size else 0) / h <= RK4_BUDGET else "chebyshev"
    if method == "chebyshev":
        out, u, t_prev = [], u0, 0.0
        for t in times:
            u = _chebyshev_segment(kappa, u, t - t_prev)
            out.append(u)
            t_prev = t
        return np.array(out)
    if method != "rk4":
        raise ValueError(f"unknown method {method!r}")
    for _ in range(12):
        monitor = monitor_factory() if monitor_factory else None
        out, u, t_prev = [], u0, 0.0
        for t in times:
            u = _rk4_segment(kappa, u, t - t_prev, h, monitor) if t > t_prev else u
            if u is None:
                break
            out.append(u)
            t_prev = t
        else:
            return np.array(out)
        h /= 2
    raise NumericalError("RK4 heat flow unstable even after 12 step halvings")


def _monotone_pair_monitor(f, rtol=1e-12):
    scale = float(f @ f)

    def factory():
        last = [scale]

        def ok(u):
            v = float(f @ u)
            if v > last[0] + rtol * scale:
                return False
            last[0] = v
            return True

        return ok

    return factory


def semigroup_pairs(kappa: ConductanceField, f, times, method="auto"):
    """``(f, exp(t L_kappa) f)`` for each ``t`` in ``times``."""
    f = np.asarray(f, dtype=float)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    order = np.argsort(times)
    mean_zero = abs(f.sum()) <= MEAN_ZERO_TOL * max(np.abs(f).sum(), 1e-300)
    factory = _monotone_pair_monitor(f) if mean_zero else None
    us = evolve(kappa, f, times[order], method=method, monitor_factory=factory)
    vals = np.empty(times.shape)
    vals[order] = us @ f
    if mean_zero and np.any(np.diff(vals[order]) > 1e-10 * (f @ f)):
        raise NumericalError("semigroup pair increased in t")
    return vals


def semigroup_pair(kappa: ConductanceField, f, t, method="auto") -> float:
    """``(f, exp(t L_kappa) f)``, nonnegative and nonincreasing in ``t``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    return float(semigroup_pairs(kappa, f, [t], method=method)[0])


# --- homogeneous case ----------------------------------------------------


def laplacian_symbol(torus: Torus) -> np.ndarray:
    """``4 sum_j sin^2(k_j / 2)`` on the grid of torus momenta ``k = 2 pi n / L``."""
    k = 2 * np.pi * np.fft.fftfreq(torus.L)
    s = 4 * np.sin(k / 2) ** 2
    out = np.zeros(torus.shape)
    for j in range(torus.d):
        shape = [1] * torus.d
        shape[j] = torus.L
        out = out + s.reshape(shape)
    return out


def homogeneous_form_fourier(f, L) -> float:
    """``(f, (-L)^{-1} f)`` for unit conductances by exact diagonalization."""
    f = np.asarray(f, dtype=float)
    d = round(math.log(f.size, L)) if f.size > 1 else 1
    torus = Torus(d, L)
    if torus.n_sites != f.size:
        raise ValueError(f"{f.size} values do not form a torus of side {L}")
    _check_mean_zero(f)
    fh = np.fft.fftn(torus.to_grid(f))
    lam = laplacian_symbol(torus)
    lam.flat[0] = np.inf
    return float(np.sum(np.abs(fh) ** 2 / lam) / torus.n_sites)


def homogeneous_semigroup(torus: Torus, f, t, kappa0=1.0):
    """``exp(t kappa0 L) f`` for constant conductance, by FFT."""
    g = torus.to_grid(np.asarray(f, dtype=float))
    lam = laplacian_symbol(torus)
    out = np.fft.ifftn(np.fft.fftn(g) * np.exp(-t * kappa0 * lam)).real
    return torus.from_grid(out)
