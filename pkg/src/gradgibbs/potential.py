"""Log-Gaussian-mixture potentials.

The potential is

    V(eta) = -log sum_i w_i exp(-kappa_i eta^2 / 2)

with ``w`` the normalized weights of an atomic mixing measure on conductances.
Promoting the mixture label to a per-edge variable gives the conditional
law of ``kappa`` given a gradient ``eta`` (see :func:`kappa_posterior`).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

DEFAULT_FLOOR = 1e-3


@dataclass(frozen=True)
class MixtureMeasure:
    """Finite atomic measure on conductance values.

    Parameters
    ----------
    atoms : sequence of (kappa, weight)
        Distinct positive conductances with positive (unnormalized) masses.
    floor : float
        Ellipticity floor; every atom must lie in ``[floor, 1/floor]``.
    """

    atoms: tuple
    floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        atoms = tuple((float(k), float(w)) for k, w in self.atoms)
        object.__setattr__(self, "atoms", atoms)
        if not atoms:
            raise ValueError("mixture needs at least one atom")
        if not 0 < self.floor < 1:
            raise ValueError(f"ellipticity floor must be in (0, 1), got {self.floor}")
        kappas = [k for k, _ in atoms]
        if len(set(kappas)) != len(kappas):
            raise ValueError("atoms must be distinct")
        for k, w in atoms:
            if not (math.isfinite(k) and math.isfinite(w)):
                raise ValueError("atoms must be finite")
            if w <= 0:
                raise ValueError(f"atom weight must be positive, got {w}")
            if not self.floor <= k <= 1 / self.floor:
                raise ValueError(
                    f"conductance {k} outside ellipticity range "
                    f"[{self.floor}, {1 / self.floor}]"
                )

    @cached_property
    def kappa(self) -> np.ndarray:
        return np.array([k for k, _ in self.atoms])

    @cached_property
    def weights(self) -> np.ndarray:
        """Normalized weights (sum to one)."""
        w = np.array([w for _, w in self.atoms])
        return w / w.sum()

    @property
    def kappa_min(self) -> float:
        return float(self.kappa.min())

    @property
    def kappa_max(self) -> float:
        return float(self.kappa.max())

    def __len__(self):
        return len(self.atoms)

    def sample(self, rng, size):
        """Draw conductances i.i.d. from the normalized measure."""
        return self.kappa[rng.choice(len(self), size=size, p=self.weights)]

    def to_dict(self):
        return {"atoms": [{"kappa": k, "weight": w} for k, w in self.atoms]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data, floor=DEFAULT_FLOOR):
        try:
            atoms = [(a["kappa"], a["weight"]) for a in data["atoms"]]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed mixture description: {data!r}") from exc
        return cls(tuple(atoms), floor=floor)

    @classmethod
    def from_json(cls, text, floor=DEFAULT_FLOOR):
        return cls.from_dict(json.loads(text), floor=floor)


def single_atom(kappa=1.0, floor=DEFAULT_FLOOR) -> MixtureMeasure:
    """The Gaussian case: a point mass at ``kappa``."""
    return MixtureMeasure(((kappa, 1.0),), floor=floor)


def two_atom(p, kappa1, kappa2, floor=DEFAULT_FLOOR) -> MixtureMeasure:
    """``p * delta_kappa1 + (1 - p) * delta_kappa2``."""
    if not 0 < p < 1:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    return MixtureMeasure(((kappa1, p), (kappa2, 1 - p)), floor=floor)


def self_dual_p(kappa1, kappa2) -> float:
    """Self-dual mixing probability of the two-atom model.

    Solves ``p / (1 - p) = (kappa2 / kappa1) ** (1/4)``.
    """
    if not (kappa1 > 0 and kappa2 > 0):
        raise ValueError("conductances must be positive")
    r = (kappa2 / kappa1) ** 0.25
    return r / (1 + r)


def _exponents(rho: MixtureMeasure, eta):
    eta = np.asarray(eta, dtype=float)
    # shape (..., n_atoms)
    return np.log(rho.weights) - 0.5 * rho.kappa * eta[..., None] ** 2


def eval_V(rho: MixtureMeasure, eta):
    """Evaluate the potential, stable for large ``|eta|`` via a shifted log-sum-exp."""
    out = -logsumexp(_exponents(rho, eta), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class KappaPosterior:
    """Conditional law of one edge conductance given its gradient."""

    rho: MixtureMeasure
    weights: np.ndarray = field(repr=True)

    def sample(self, rng):
        return self.rho.kappa[rng.choice(len(self.rho), p=self.weights)]


def posterior_weights(rho: MixtureMeasure, eta) -> np.ndarray:
    """Vectorized posterior: array of shape ``eta.shape + (n_atoms,)``."""
    a = _exponents(rho, eta)
    a = a - a.max(axis=-1, keepdims=True)
    w = np.exp(a)
    return w / w.sum(axis=-1, keepdims=True)


def kappa_posterior(rho: MixtureMeasure, eta: float) -> KappaPosterior:
    """Weights proportional to ``w_i exp(-kappa_i eta^2 / 2)``."""
    return KappaPosterior(rho, posterior_weights(rho, float(eta)))
