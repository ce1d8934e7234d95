"""Variable-speed random walk among conductances and its heat kernel.

The walk waits an exponential time of rate ``sum_y kappa_xy`` at ``x`` and
then jumps to ``y`` with probability proportional to ``kappa_xy``; its
generator is ``L_kappa``.  Positions are tracked on the torus together with
the unfolded integer displacement.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, PreconditionError, ResolutionError
from .homogenize import EffectiveMatrix
from .lattice import ConductanceField, Torus
from .operator import apply_L_array, chebyshev_exp, evolve, laplacian_symbol, spectral_bound

WRAP_FRACTION = 0.01


@dataclass
class WalkPath:
    """Jump times and unfolded positions (``positions[0]`` is the origin)."""

    torus: Torus
    times: np.ndarray
    positions: np.ndarray
    t_max: float

    def position_at(self, t) -> np.ndarray:
        k = np.searchsorted(self.times, t, side="right")
        return self.positions[k]

    def check(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("jump times must increase")
        steps = np.abs(np.diff(self.positions, axis=0)).sum(axis=1)
        if np.any(steps != 1):
            raise ValueError("consecutive positions must be neighbours")


@dataclass
class HeatKernel:
    """``p[x] = P(X_t = x)`` for the walk started at the origin, folded to the torus."""

    torus: Torus
    t: float
    p: np.ndarray


def _jump_tables(torus: Torus, k):
    """Total rates ``(..., n)`` and cumulative jump probabilities ``(..., n, 2d)``.

    Option ``2j`` is the jump to ``x + e_j``, option ``2j + 1`` to ``x - e_j``.
    """
    cols = []
    for j in range(torus.d):
        cols.append(k[..., j, :])
        cols.append(k[..., j, torus.backward[j]])
    w = np.stack(cols, axis=-1)
    tot = w.sum(axis=-1)
    return tot, np.cumsum(w / tot[..., None], axis=-1)


def _moves(torus: Torus):
    d = torus.d
    steps = np.zeros((2 * d, d), dtype=np.int64)
    nbr = np.empty((2 * d, torus.n_sites), dtype=np.int64)
    for j in range(d):
        steps[2 * j, j], steps[2 * j + 1, j] = 1, -1
        nbr[2 * j], nbr[2 * j + 1] = torus.forward[j], torus.backward[j]
    return steps, nbr


def simulate_walk(kappa: ConductanceField, t_max: float, seed=0) -> WalkPath:
    """Event-driven simulation of one path on ``[0, t_max]``."""
    if not t_max > 0:
        raise PreconditionError("t_max must be positive")
    t = kappa.torus
    rng = np.random.default_rng(seed)
    tot, cum = _jump_tables(t, kappa.kappa)
    steps, nbr = _moves(t)
    site, clock = 0, 0.0
    pos = np.zeros(t.d, dtype=np.int64)
    times, positions = [], [pos.copy()]
    while True:
        clock += rng.exponential(1 / tot[site])
        if clock > t_max:
            break
        o = min(int(np.searchsorted(cum[site], rng.random(), side="right")), 2 * t.d - 1)
        site = nbr[o, site]
        pos = pos + steps[o]
        times.append(clock)
        positions.append(pos.copy())
    return WalkPath(t, np.array(times), np.array(positions), t_max)


def simulate_displacements(kappas, t: float, n_paths: int, rng) -> np.ndarray:
    """Unfolded displacements ``X_t`` of ``n_paths`` independent walkers per environment.

    All walkers start at the origin.  Returns shape ``(n_env, n_paths, d)``.
    """
    kappas = [kappas] if isinstance(kappas, ConductanceField) else list(kappas)
    torus = kappas[0].torus
    k = np.stack([c.kappa for c in kappas])
    n_env, n = len(kappas), torus.n_sites
    tot, cum = _jump_tables(torus, k)
    tot, cum = tot.reshape(-1), cum.reshape(-1, 2 * torus.d)
    steps, nbr = _moves(torus)
    env = np.repeat(np.arange(n_env), n_paths)
    site = np.zeros(env.size, dtype=np.int64)
    disp = np.zeros((env.size, torus.d), dtype=np.int64)
    clock = np.zeros(env.size)
    active = np.arange(env.size)
    while active.size:
        row = env[active] * n + site[active]
        clock[active] += rng.exponential(1.0, active.size) / tot[row]
        alive = clock[active] <= t
        active, row = active[alive], row[alive]
        if not active.size:
            break
        u = rng.random(active.size)
        o = np.minimum((u[:, None] >= cum[row]).sum(axis=1), 2 * torus.d - 1)
        site[active] = nbr[o, site[active]]
        disp[active] += steps[o]
    return disp.reshape(n_env, n_paths, torus.d)


def _environments(env_sampler, n_env, seed):
    if callable(env_sampler):
        return [env_sampler(np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i, 1)))) for i in range(n_env)]
    envs = list(env_sampler)
    if len(envs) < n_env:
        raise PreconditionError(f"need {n_env} environments, got {len(envs)}")
    return envs[:n_env]


def annealed_q_estimate(env_sampler, t: float, n_env: int, n_paths: int, seed=0, chunk=64) -> EffectiveMatrix:
    """``q = Cov(X_t) / t`` averaged over environments and paths.

    Parameters
    ----------
    env_sampler : callable or sequence
        ``env_sampler(rng) -> ConductanceField`` or a sequence of fields.
    chunk : int
        Environments simulated together (memory vs speed).

    Raises
    ------
    ResolutionError
        If more than 1% of the paths reach ``L/2`` in some coordinate, where
        the torus displacement no longer matches the walk on the lattice.
    """
    if n_env < 2:
        raise PreconditionError("need at least two environments for standard errors")
    envs = _environments(env_sampler, n_env, seed)
    if t * min(e.kappa_min for e in envs) < 10:
        raise PreconditionError("t * kappa_min must be at least 10 for the diffusive regime")
    torus = envs[0].torus
    per_env, wrapped = [], 0
    for start in range(0, n_env, chunk):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(start, 0)))
        X = simulate_displacements(envs[start : start + chunk], t, n_paths, rng).astype(float)
        wrapped += int(np.sum(np.abs(X).max(axis=-1) >= torus.L / 2))
        per_env.append(np.einsum("epi,epj->eij", X, X) / (n_paths * t))
    frac = wrapped / (n_env * n_paths)
    if frac > WRAP_FRACTION:
        raise ResolutionError(
            f"{100 * frac:.1f}% of paths reached half the torus side; increase L beyond {torus.L}"
        )
    m = np.concatenate(per_env)
    q = m.mean(axis=0)
    se = m.std(axis=0, ddof=1) / np.sqrt(n_env)
    return EffectiveMatrix(
        0.5 * (q + q.T), "walk", 0.5 * (se + se.T), n_env * n_paths,
        {"t": t, "n_env": n_env, "n_paths": n_paths, "wrap_fraction": frac},
    )


# --- deterministic heat kernels ----------------------------------------------


def _positivity_monitor(scale=1e-12):
    def factory():
        return lambda u: u.min() >= -scale

    return factory


def heat_kernel(kappa: ConductanceField, t: float, method="chebyshev") -> HeatKernel:
    """Forward equation ``dp/ds = L_kappa p`` from the point mass at the origin.

    The default Chebyshev expansion is exact to round-off; ``method="rk4"``
    uses the explicit integrator with a positivity monitor.
    """
    return heat_kernels(kappa, [t], method)[0]


def heat_kernels(kappa: ConductanceField, times, method="chebyshev") -> list:
    times = np.asarray(times, dtype=float)
    if np.any(times < 0):
        raise PreconditionError("t must be nonnegative")
    tr = kappa.torus
    p0 = np.zeros(tr.n_sites)
    p0[0] = 1.0
    order = np.argsort(times)
    ps = evolve(kappa, p0, times[order], method=method, monitor_factory=_positivity_monitor())
    out = [None] * len(times)
    for i, p in zip(order, ps):
        if abs(p.sum() - 1) > 1e-9:
            raise NumericalError(f"heat kernel lost mass: total {p.sum():.12f}")
        out[i] = HeatKernel(tr, float(times[i]), p)
    return out


def batched_heat_kernels(kappas, times, start=0) -> np.ndarray:
    """Heat kernels of several environments at once, shape ``(n_env, n_times, n_sites)``.

    ``start`` is the site index of the initial point mass.
    """
    kappas = list(kappas)
    torus = kappas[0].torus
    k = np.stack([c.kappa for c in kappas])
    lam = spectral_bound(k)
    u = np.zeros((len(kappas), torus.n_sites))
    u[:, start] = 1.0
    out, t_prev = [], 0.0
    for t in np.asarray(times, dtype=float):
        if t < t_prev:
            raise PreconditionError("times must be sorted")
        u = chebyshev_exp(lambda v: apply_L_array(torus, k, v), lam, u, t - t_prev)
        out.append(u)
        t_prev = t
    p = np.stack(out, axis=1)
    if np.abs(p.sum(axis=-1) - 1).max() > 1e-9:
        raise NumericalError("heat kernel lost mass")
    return p


def mixed_differences(torus: Torus, p0, p_shifted) -> np.ndarray:
    """``grad_i`` in the starting point times ``grad_j`` in the endpoint.

    ``p_shifted[i]`` is the kernel started at ``e_i`` and ``p0`` the one started
    at the origin (trailing axis = sites).  Returns all ordered pairs
    ``(i, j)``; shape ``(..., d * d, n_sites)``.
    """
    fw = torus.forward
    out = []
    for i in range(torus.d):
        diff = p_shifted[i] - p0
        for j in range(torus.d):
            out.append(diff[..., fw[j]] - diff)
    return np.stack(out, axis=-2)


def second_differences(torus: Torus, f) -> np.ndarray:
    """``f(x+e_i+e_j) - f(x+e_i) - f(x+e_j) + f(x)`` for pairs ``i <= j``; shape ``(..., n_pairs, n_sites)``."""
    f = np.asarray(f, dtype=float)
    fw = torus.forward
    out = []
    for i in range(torus.d):
        for j in range(i, torus.d):
            out.append(f[..., fw[j][fw[i]]] - f[..., fw[i]] - f[..., fw[j]] + f)
    return np.stack(out, axis=-2)


@dataclass
class DecayFit:
    """Log-log fit of ``M(t) = max_x E|second difference of p_t(x)|``."""

    times: np.ndarray
    max_second_difference: np.ndarray
    env_sd: np.ndarray
    slope: float
    slope_se: float
    c1: float
    n_env: int
    kind: str = "endpoint"

    @property
    def ci95(self):
        return (self.slope - 1.96 * self.slope_se, self.slope + 1.96 * self.slope_se)

    def to_csv(self, fh=None) -> str:
        buf = fh if fh is not None else io.StringIO()
        w = csv.writer(buf)
        w.writerow(["t", "max_second_difference", "env_sd"])
        for row in zip(self.times, self.max_second_difference, self.env_sd):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue() if fh is None else ""


def _slope(logt, logm):
    A = np.vstack([logt, np.ones_like(logt)]).T
    coef, *_ = np.linalg.lstsq(A, logm, rcond=None)
    return coef[0]


def derivative_decay_check(env_sampler, times, n_env: int, seed=0, chunk=8, kind="endpoint") -> DecayFit:
    """Fit the decay exponent of ``max_x E_env |grad_i grad_j p_t(x)|``.

    Parameters
    ----------
    kind : {"endpoint", "mixed"}
        ``endpoint`` differentiates ``p_t(0, x)`` twice in ``x``;
        ``mixed`` differentiates once in the starting point and once in the
        endpoint, ``grad_i^y grad_j^x p_t(y, x)`` at ``y = 0``.  In a
        homogeneous environment the two coincide up to sign.

    The slope's standard error is a jackknife over environments.

    Raises
    ------
    PreconditionError
        If ``t_max`` is so large that the torus is close to equilibrium
        (``t_max * 4 d kappa_max sin^2(pi/L) > 3``).
    ResolutionError
        If the curve flattens at the end of the grid (saturation).
    """
    times = np.sort(np.asarray(times, dtype=float))
    if times[0] <= 0:
        raise PreconditionError("times must be positive")
    envs = _environments(env_sampler, n_env, seed)
    torus = envs[0].torus
    lam_min = float(np.sort(laplacian_symbol(torus).ravel())[1])
    kmax = max(e.kappa_max for e in envs)
    if times[-1] * lam_min * kmax > 3:
        raise PreconditionError(
            f"t_max={times[-1]:g} saturates the torus of side {torus.L}; need t_max * lambda_min <= 3"
        )
    if kind not in ("endpoint", "mixed"):
        raise ValueError(f"unknown kind {kind!r}")
    absd = []
    for start in range(0, n_env, chunk):
        block = envs[start : start + chunk]
        p = batched_heat_kernels(block, times)
        if kind == "endpoint":
            absd.append(np.abs(second_differences(torus, p)))
        else:
            shifted = [batched_heat_kernels(block, times, start=int(torus.forward[i, 0])) for i in range(torus.d)]
            absd.append(np.abs(mixed_differences(torus, p, shifted)))
    D = np.concatenate(absd)  # (env, time, pair, site)
    total = D.sum(axis=0)
    mean = total / n_env
    flat = mean.reshape(len(times), -1)
    arg = flat.argmax(axis=1)
    M = flat[np.arange(len(times)), arg]
    sd = D.reshape(n_env, len(times), -1)[:, np.arange(len(times)), arg].std(axis=0, ddof=1) if n_env > 1 else np.zeros(len(times))
    logt = np.log(times)
    slope = _slope(logt, np.log(M))
    if n_env > 1:
        jack = []
        for e in range(n_env):
            Me = ((total - D[e]) / (n_env - 1)).reshape(len(times), -1).max(axis=1)
            jack.append(_slope(logt, np.log(Me)))
        jack = np.array(jack)
        se = float(np.sqrt((n_env - 1) / n_env * np.sum((jack - jack.mean()) ** 2)))
    else:
        se = float("nan")
    if len(times) >= 3:
        last = (np.log(M[-1]) - np.log(M[-2])) / (logt[-1] - logt[-2])
        if last > 0.5 * slope:
            raise ResolutionError(f"decay curve flattens at t={times[-1]:g} (local slope {last:.2f}); increase L")
    d = torus.d
    c1 = float(np.max(M * times ** (d / 2 + 1)))
    return DecayFit(times, M, sd, float(slope), se, c1, n_env, kind)
