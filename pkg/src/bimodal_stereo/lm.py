"""Batched Levenberg-Marquardt for many tiny independent least-squares problems.

Each row of ``x`` is its own problem with its own damping, so thousands of
3-unknown pixel problems advance together in a handful of numpy calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LMResult:
    x: np.ndarray
    cost: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray


def levenberg_marquardt(fun, x0, max_iter=1000, cost_tol=0.0, gtol=1e-15, xtol=1e-15,
                        max_step=None, tau=1e-3):
    """Minimise ``sum(r**2)`` independently for every row of ``x0``.

    ``fun(x, idx)`` returns residuals ``(k, m)`` and Jacobians ``(k, m, n)``
    for the problems ``idx`` evaluated at ``x`` (shape ``(k, n)``).  Damping
    follows Nielsen's gain-ratio rule; ``max_step`` additionally caps the step
    length.  A problem counts as converged when it stops for any reason other
    than the iteration cap.
    """
    x = np.array(x0, dtype=float)
    N, n = x.shape
    all_idx = np.arange(N)
    r, J = fun(x, all_idx)
    cost = np.einsum("km,km->k", r, r)
    g = np.einsum("kmi,km->ki", J, r)
    A = np.einsum("kmi,kmj->kij", J, J)
    mu = tau * np.maximum(np.max(np.diagonal(A, axis1=1, axis2=2), axis=1), 1e-12)
    nu = np.full(N, 2.0)
    active = (cost > cost_tol) & (np.max(np.abs(g), axis=1) > gtol)
    converged = ~active
    iterations = np.zeros(N, dtype=int)
    eye = np.eye(n)

    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        iterations[idx] += 1
        gi = g[idx]
        H = A[idx] + mu[idx, None, None] * eye
        step = np.linalg.solve(H, -gi[..., None])[..., 0]
        if max_step is not None:
            norm = np.linalg.norm(step, axis=1)
            step *= np.minimum(1.0, max_step / np.maximum(norm, 1e-300))[:, None]
        xi = x[idx]
        tiny = np.linalg.norm(step, axis=1) <= xtol * (np.linalg.norm(xi, axis=1) + xtol)
        x_new = xi + step
        r_new, J_new = fun(x_new, idx)
        cost_new = np.einsum("km,km->k", r_new, r_new)
        pred = np.einsum("ki,ki->k", step, mu[idx, None] * step - gi)
        rho = (cost[idx] - cost_new) / np.maximum(pred, 1e-300)
        ok = (rho > 0) & np.isfinite(cost_new)

        acc = idx[ok]
        x[acc] = x_new[ok]
        cost[acc] = cost_new[ok]
        g[acc] = np.einsum("kmi,km->ki", J_new[ok], r_new[ok])
        A[acc] = np.einsum("kmi,kmj->kij", J_new[ok], J_new[ok])
        mu[acc] *= np.maximum(1.0 / 3.0, 1.0 - (2.0 * rho[ok] - 1.0) ** 3)
        nu[acc] = 2.0
        rej = idx[~ok]
        mu[rej] *= nu[rej]
        nu[rej] *= 2.0

        done = tiny | (cost[idx] <= cost_tol) | (np.max(np.abs(g[idx]), axis=1) <= gtol) | (mu[idx] > 1e30)
        active[idx[done]] = False
        converged[idx[done]] = True

    return LMResult(x, cost, converged, iterations)
