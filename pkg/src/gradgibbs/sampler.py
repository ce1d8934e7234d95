"""Alternating Gibbs sampler for the joint law of gradients and conductances.

Given the heights ``phi``, the edge conductances are conditionally
independent with law ``kappa_posterior(rho, eta_b)``.  Given the
conductances, ``phi`` (pinned at the origin) is a centered Gaussian with
precision ``-L_kappa``.  Alternating exact draws from the two conditionals
leaves the joint torus measure invariant.

Randomness: sweep ``s`` of a chain seeded with ``seed`` uses generators built
from ``SeedSequence(seed, spawn_key=(s, stage))``.  A chain is therefore
resumable from ``(seed, sweep_count)`` alone, and every edge or site consumes
a fixed slot of that generator regardless of how the sweep is vectorized.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import NumericalError, PreconditionError
from .lattice import (
    ConductanceField,
    GradientField,
    HeightField,
    Torus,
    as_field,
    field_record,
    grad,
    read_fields,
)
from .operator import PinnedSolver, incidence
from .potential import MixtureMeasure, posterior_weights
from .stats import integrated_autocorrelation_time

STAGE_KAPPA, STAGE_PHI, STAGE_INIT = 0, 1, 2
EXACT_SITE_LIMIT = 10_000


def stage_rng(seed: int, sweep: int, stage: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(sweep, stage)))


@dataclass
class ChainState:
    """Current ``(kappa, phi)`` plus the counters that determine future randomness."""

    kappa: ConductanceField
    phi: HeightField
    sweep_count: int = 0
    seed: int = 0

    @property
    def rng_state(self) -> dict:
        return {"seed": self.seed, "sweep": self.sweep_count}

    def save(self, path):
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(field_record(self.kappa))
            fh.write(field_record(self.phi))
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(self.rng_state))

    @classmethod
    def load(cls, path, floor=1e-3):
        path = Path(path)
        with open(path, "rb") as fh:
            (hk, tk, vk), (hp, tp, vp) = list(read_fields(fh))
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        return cls(
            ConductanceField(tk, vk, floor=floor),
            HeightField(tp, vp),
            sweep_count=meta["sweep"],
            seed=meta["seed"],
        )


@dataclass
class ChainConfig:
    """Chain parameters.

    Parameters
    ----------
    phi_update_mode : {"exact", "heat_bath"}
        ``exact`` draws ``phi | kappa`` by a sparse Cholesky solve;
        ``heat_bath`` performs ``heat_bath_sweeps`` single-site sweeps.
    """

    rho: MixtureMeasure
    torus: Torus
    burn_in: int = 1000
    thinning: int = 10
    seed: int = 0
    phi_update_mode: str = "exact"
    heat_bath_sweeps: int = 1

    def __post_init__(self):
        if self.burn_in < 0:
            raise PreconditionError("burn_in must be nonnegative")
        if self.thinning < 1:
            raise PreconditionError("thinning must be at least 1")
        if self.phi_update_mode not in ("exact", "heat_bath"):
            raise PreconditionError(f"unknown phi_update_mode {self.phi_update_mode!r}")
        if self.heat_bath_sweeps < 1:
            raise PreconditionError("heat_bath_sweeps must be at least 1")

    def to_dict(self) -> dict:
        return {
            "rho": self.rho.to_dict(),
            "d": self.torus.d,
            "L": self.torus.L,
            "burn_in": self.burn_in,
            "thinning": self.thinning,
            "seed": self.seed,
            "phi_update_mode": self.phi_update_mode,
            "heat_bath_sweeps": self.heat_bath_sweeps,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        rho = MixtureMeasure.from_dict(data.pop("rho"))
        torus = Torus(data.pop("d"), data.pop("L"))
        return cls(rho=rho, torus=torus, **data)


# --- kappa | eta ---------------------------------------------------------


def _check_atoms(kappa: ConductanceField, rho: MixtureMeasure):
    if not np.all(np.isin(kappa.kappa, rho.kappa)):
        raise PreconditionError("conductance field contains values outside the mixture atoms")


def kappa_step(state: ChainState, rho: MixtureMeasure, rng=None) -> ChainState:
    """Redraw every edge conductance from its posterior given ``eta = grad(phi)``."""
    if len(rho) == 1:
        return replace(state, kappa=ConductanceField(state.kappa.torus, state.kappa.kappa, floor=rho.floor))
    if rng is None:
        rng = stage_rng(state.seed, state.sweep_count, STAGE_KAPPA)
    eta = grad(state.phi).eta
    cdf = np.cumsum(posterior_weights(rho, eta), axis=-1)
    u = rng.random(eta.shape)
    idx = np.minimum((u[..., None] >= cdf).sum(axis=-1), len(rho) - 1)
    kappa = ConductanceField(state.kappa.torus, rho.kappa[idx], floor=rho.floor)
    return replace(state, kappa=kappa)


# --- phi | kappa, exact ----------------------------------------------------


class PinnedGaussian(PinnedSolver):
    """Exact Gaussian draws with precision ``-L_kappa`` on the pinned coordinates."""

    def sample(self, kappa: ConductanceField, rng, size=None):
        """Exact draw(s) of pinned ``phi`` with precision ``-L_kappa``.

        Perturbation-optimization: ``xi = B^T sqrt(kappa) z`` has covariance
        ``-L_kappa``, so ``K_p^{-1} xi_p`` has covariance ``K_p^{-1}``.
        """
        self.factor(kappa)
        m = self.torus.n_edges
        shape = (m,) if size is None else (m, size)
        z = rng.standard_normal(shape)
        sk = np.sqrt(kappa.kappa.ravel())
        xi = incidence(self.torus).T @ (sk[:, None] * z if size else sk * z)
        out = np.zeros((self.torus.n_sites,) + (() if size is None else (size,)))
        out[1:] = np.asarray(self.solve(np.ascontiguousarray(xi[1:])))
        return out if size is None else out.T


@lru_cache(maxsize=8)
def pinned_gaussian(torus: Torus) -> PinnedGaussian:
    return PinnedGaussian(torus)


def sample_phi(kappa: ConductanceField, rng, size=None):
    """Exact draws of ``phi | kappa``; shape ``(n_sites,)`` or ``(size, n_sites)``."""
    return pinned_gaussian(kappa.torus).sample(kappa, rng, size)


def phi_step_exact(state: ChainState, rng=None) -> ChainState:
    """Redraw ``phi`` exactly from the pinned Gaussian with precision ``-L_kappa``."""
    if rng is None:
        rng = stage_rng(state.seed, state.sweep_count, STAGE_PHI)
    phi = sample_phi(state.kappa, rng)
    return replace(state, phi=HeightField(state.kappa.torus, phi))


# --- phi | kappa, heat bath -------------------------------------------------


@lru_cache(maxsize=16)
def site_colors(torus: Torus) -> tuple:
    """Proper coloring of the torus graph; sites of one color share no edge.

    Even ``L`` gives the two checkerboard classes.  Odd ``L`` uses the
    3-coloring ``sum_j c(x_j) mod 3`` with ``c`` a proper coloring of the cycle.
    """
    L = torus.L
    if L % 2 == 0:
        c, k = np.arange(L) % 2, 2
    else:
        c, k = np.arange(L) % 2, 3
        c[-1] = 2
    color = c[torus.coords].sum(axis=1) % k
    return tuple(np.flatnonzero(color == i) for i in range(k))


def heat_bath_moments(kappa: ConductanceField, phi, sites=None):
    """Single-site conditional mean ``sum_y kappa_xy phi_y / sum_y kappa_xy`` and variance ``1 / sum_y kappa_xy``."""
    t = kappa.torus
    phi = np.asarray(phi, dtype=float)
    k = kappa.kappa
    s = np.zeros(t.n_sites)
    for j in range(t.d):
        s += k[j] * phi[t.forward[j]]
        back = t.backward[j]
        s += k[j, back] * phi[back]
    tot = kappa.site_total()
    if sites is not None:
        s, tot = s[sites], tot[sites]
    return s / tot, 1 / tot


def phi_step_heat_bath(state: ChainState, sweeps: int = 1, rng=None) -> ChainState:
    """Full-lattice single-site Gaussian heat-bath sweeps (origin kept pinned)."""
    if sweeps < 1:
        raise PreconditionError("sweeps must be at least 1")
    if rng is None:
        rng = stage_rng(state.seed, state.sweep_count, STAGE_PHI)
    kappa = state.kappa
    phi = state.phi.phi.copy()
    classes = [c[c != 0] for c in site_colors(kappa.torus)]
    for _ in range(sweeps):
        for sites in classes:
            mean, var = heat_bath_moments(kappa, phi, sites)
            phi[sites] = mean + np.sqrt(var) * rng.standard_normal(sites.size)
    return replace(state, phi=HeightField(kappa.torus, phi))


# --- chains ------------------------------------------------------------------


def initial_state(config: ChainConfig) -> ChainState:
    """Conductances drawn from the prior, flat heights."""
    rng = stage_rng(config.seed, 0, STAGE_INIT)
    t = config.torus
    kappa = config.rho.sample(rng, (t.d, t.n_sites))
    return ChainState(ConductanceField(t, kappa, floor=config.rho.floor), HeightField.zeros(t), 0, config.seed)


def sweep(state: ChainState, config: ChainConfig) -> ChainState:
    """One alternation ``phi | kappa`` then ``kappa | eta``."""
    if config.phi_update_mode == "exact":
        state = phi_step_exact(state)
    else:
        state = phi_step_heat_bath(state, config.heat_bath_sweeps)
    state = kappa_step(state, config.rho)
    return replace(state, sweep_count=state.sweep_count + 1)


def is_emitted(config: ChainConfig, sweep_count: int) -> bool:
    k = sweep_count - config.burn_in
    return k > 0 and k % config.thinning == 0


def run_chain_states(config: ChainConfig, state: ChainState | None = None, n_samples=None) -> Iterator[ChainState]:
    """Post-burn-in, thinned chain states (the ``phi`` stored is the one ``kappa`` was drawn from)."""
    if state is None:
        state = initial_state(config)
    elif state.seed != config.seed:
        raise PreconditionError("state seed does not match config seed")
    _check_atoms(state.kappa, config.rho)
    emitted = 0
    while n_samples is None or emitted < n_samples:
        state = sweep(state, config)
        if is_emitted(config, state.sweep_count):
            emitted += 1
            yield state


def run_chain(config: ChainConfig, state: ChainState | None = None, n_samples=None):
    """Stream of ``(GradientField, ConductanceField)`` samples.

    Deterministic given ``config.seed``; passing a saved ``state`` continues
    the same stream.
    """
    for s in run_chain_states(config, state, n_samples):
        yield grad(s.phi), s.kappa


# --- diagnostics and persistence ----------------------------------------------


def chain_diagnostics(etas) -> dict:
    """Autocorrelation summary of the spatial mean of ``eta_b^2`` along a chain."""
    series = np.array([np.mean(np.asarray(e.eta if hasattr(e, "eta") else e) ** 2) for e in etas])
    tau = integrated_autocorrelation_time(series) if series.size >= 8 else float("nan")
    return {
        "n_samples": int(series.size),
        "mean_eta_sq": float(series.mean()) if series.size else float("nan"),
        "tau_int_eta_sq": tau,
        "effective_samples": float(series.size / tau) if np.isfinite(tau) else float("nan"),
    }


def write_archive(directory, config: ChainConfig, samples, extra=None) -> dict:
    """Write ``samples.bin`` (gradient, conductance record pairs) and ``manifest.json``.

    ``samples`` yields ``(sweep_index, GradientField, ConductanceField)``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sweeps = []
    etas = []
    with open(directory / "samples.bin", "wb") as fh:
        for s, eta, kappa in samples:
            fh.write(field_record(eta))
            fh.write(field_record(kappa))
            sweeps.append(int(s))
            etas.append(eta)
    manifest = {
        "config": config.to_dict(),
        "seed": config.seed,
        "sweep_indices": sweeps,
        "diagnostics": chain_diagnostics(etas),
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def read_archive(directory):
    """Yield ``(GradientField, ConductanceField)`` pairs from an archive directory."""
    with open(Path(directory) / "samples.bin", "rb") as fh:
        records = read_fields(fh)
        for rec in records:
            eta = as_field(*rec)
            kappa = as_field(*next(records))
            yield eta, kappa



# --- environment ensembles ------------------------------------------------------


def iid_conductances(rho: MixtureMeasure, torus: Torus, n: int, seed: int = 0) -> list:
    """``n`` environments with i.i.d. edge conductances from ``rho`` (control ensemble)."""
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        out.append(ConductanceField(torus, rho.sample(rng, (torus.d, torus.n_sites)), floor=rho.floor))
    return out


def chain_conductances(config: ChainConfig, n: int) -> list:
    """Conductance marginals of ``n`` thinned chain samples."""
    return [kappa for _, kappa in run_chain(config, n_samples=n)]
