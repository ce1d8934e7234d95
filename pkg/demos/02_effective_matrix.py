"""Two estimators of the effective matrix q.

The corrector solves (-L_kappa) chi_j = div(kappa e_j) on the torus and
q_jk = 2/N sum kappa_b (e_j + grad chi_j)_b (e_k + grad chi_k)_b.  The walk
estimator simulates the variable-speed random walk and measures Cov(X_t)/t.
In one dimension both must reproduce the series-resistor law
q/2 = (E 1/kappa)^-1.  In two dimensions at the self-dual point the two
estimators should agree with each other.
"""
import time

import numpy as np

from gradgibbs import ChainConfig, Torus, effective_matrix_from_corrector, self_dual_p, two_atom
from gradgibbs.sampler import chain_conductances, iid_conductances
from gradgibbs.walk import annealed_q_estimate

rho = two_atom(0.5, 4.0, 1.0)
envs = iid_conductances(rho, Torus(1, 1024), 100, seed=2)
t0 = time.perf_counter()
qc = effective_matrix_from_corrector(envs)
qw = annealed_q_estimate(envs, 200.0, len(envs), 300, seed=3)
print(f"d=1: oracle q/2 = {1 / np.sum(rho.weights / rho.kappa):.4f}")
print(f"     corrector q/2 = {qc.q[0, 0] / 2:.4f}, walk q/2 = {qw.q[0, 0] / 2:.4f} +- {qw.se[0, 0] / 2:.4f}  ({time.perf_counter() - t0:.1f}s)")

rho2 = two_atom(self_dual_p(4.0, 1.0), 4.0, 1.0)
envs2 = chain_conductances(ChainConfig(rho2, Torus(2, 64), burn_in=200, thinning=5, seed=4), 16)
qc2 = effective_matrix_from_corrector(envs2)
qw2 = annealed_q_estimate(envs2, 20.0, len(envs2), 500, seed=5)
print("d=2 self-dual, corrector q:\n", np.round(qc2.q, 3), "\n  walk q:\n", np.round(qw2.q, 3))
print("off-diagonal entries are reported, not assumed to vanish")
