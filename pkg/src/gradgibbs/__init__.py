"""Gradient Gibbs measures with log-Gaussian-mixture potentials.

Exact sampling of the extended (gradient, conductance) measure, the
conductance operator and its random walk, correctors and the effective
matrix, and the scaling limit to a Gaussian free field.
"""
__version__ = "0.1.0"

from .errors import ConvergenceError, InconsistencyError, NumericalError, PreconditionError, ResolutionError
from .homogenize import EffectiveMatrix, corrector, effective_matrix_from_corrector
from .lattice import ConductanceField, GradientField, HeightField, Torus
from .potential import MixtureMeasure, self_dual_p, single_atom, two_atom
from .sampler import ChainConfig, run_chain, run_chain_states
from .scaling import TestFunctionSpec, discretize, gff_limit_test, h_norm, phi_pairing
from .walk import annealed_q_estimate, derivative_decay_check, heat_kernel

__all__ = [
    "ChainConfig",
    "ConductanceField",
    "ConvergenceError",
    "EffectiveMatrix",
    "GradientField",
    "HeightField",
    "InconsistencyError",
    "MixtureMeasure",
    "NumericalError",
    "PreconditionError",
    "ResolutionError",
    "TestFunctionSpec",
    "Torus",
    "annealed_q_estimate",
    "corrector",
    "derivative_decay_check",
    "discretize",
    "effective_matrix_from_corrector",
    "gff_limit_test",
    "h_norm",
    "heat_kernel",
    "phi_pairing",
    "run_chain",
    "run_chain_states",
    "self_dual_p",
    "single_atom",
    "two_atom",
]
