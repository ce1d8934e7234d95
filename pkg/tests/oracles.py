"""Independent reference computations shared by the unit and acceptance tests."""
import itertools

import numpy as np


def loop_laplacian(torus, kappa):
    """Dense ``-L_kappa`` assembled edge by edge from coordinates."""
    n = torus.n_sites
    K = np.zeros((n, n))
    for x in range(n):
        cx = torus.coords[x]
        for j in range(torus.d):
            cy = cx.copy()
            cy[j] = (cy[j] + 1) % torus.L
            y = int(sum(c * torus.L**i for i, c in enumerate(cy)))
            k = kappa[j, x]
            K[x, x] += k
            K[y, y] += k
            K[x, y] -= k
            K[y, x] -= k
    return K


def pinned_covariance(torus, kappa):
    """Covariance of ``phi`` pinned at site 0 (zero row and column at the origin)."""
    K = loop_laplacian(torus, kappa)
    C = np.zeros_like(K)
    C[1:, 1:] = np.linalg.inv(K[1:, 1:])
    return C


def enumerate_extended_measure(torus, rho, f):
    """Exact torus moments by summing over every conductance assignment.

    Each assignment ``kappa`` carries weight ``prod_b w(kappa_b) det(K_p)^{-1/2}``
    where ``K_p`` is ``-L_kappa`` with the origin removed.  Returns per-edge
    ``E[eta_b^2]``, ``E[eta_b^4]`` and ``E[cos(phi(f))]``.
    """
    m = torus.n_edges
    tail = np.tile(np.arange(torus.n_sites), torus.d)
    head = torus.forward.ravel()
    logw_all, m2_all, m4_all, cf_all = [], [], [], []
    for assignment in itertools.product(range(len(rho)), repeat=m):
        idx = np.array(assignment)
        kappa = rho.kappa[idx].reshape(torus.d, torus.n_sites)
        K = loop_laplacian(torus, kappa)
        sign, logdet = np.linalg.slogdet(K[1:, 1:])
        C = np.zeros_like(K)
        C[1:, 1:] = np.linalg.inv(K[1:, 1:])
        var = C[head, head] + C[tail, tail] - 2 * C[head, tail]
        logw_all.append(np.log(rho.weights[idx]).sum() - 0.5 * logdet)
        m2_all.append(var)
        m4_all.append(3 * var**2)
        cf_all.append(np.exp(-0.5 * f @ C @ f))
    logw = np.array(logw_all)
    p = np.exp(logw - logw.max())
    p /= p.sum()
    shape = (torus.d, torus.n_sites)
    return {
        "eta2": (p @ np.array(m2_all)).reshape(shape),
        "eta4": (p @ np.array(m4_all)).reshape(shape),
        "cos_phi_f": float(p @ np.array(cf_all)),
    }
