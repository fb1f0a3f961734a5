"""Least-squares depth from a gradient field.

The integration stencil is the differentiation stencil of
:func:`bimodal_stereo.core.stencil`, so differentiating a depth map and
integrating the result reproduces it up to a constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from .core import DepthGrid, stencil

# weight of the trapezoid equations that tie together the even/odd
# sub-lattices central differences leave uncoupled around holes
COUPLING_WEIGHT = 1e-4


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class GradientField:
    p: np.ndarray
    q: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        q = np.asarray(self.q, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if p.shape != q.shape or p.shape != mask.shape:
            raise ValueError("p, q and mask must share one 2-D shape")
        if not (np.all(np.isfinite(p[mask])) and np.all(np.isfinite(q[mask]))):
            raise ValueError("masked-in gradients must be finite")
        object.__setattr__(self, "p", np.where(mask, p, np.nan))
        object.__setattr__(self, "q", np.where(mask, q, np.nan))
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self):
        return self.mask.shape


@dataclass(frozen=True, eq=False)
class IntegrationInfo:
    labels: np.ndarray  # component id per pixel, -1 outside the solved set
    n_components: int
    rms_residual: float  # gradient misfit of the solution (nonzero for curl)
    relative_residual: float  # of the linear solve


def normals_to_gradients(normals, min_n3=1e-3):
    n = normals.n
    mask = normals.mask & (np.nan_to_num(n[..., 2]) >= min_n3)
    n3 = np.where(mask, n[..., 2], 1.0)
    p = np.where(mask, -n[..., 0] / n3, np.nan)
    q = np.where(mask, -n[..., 1] / n3, np.nan)
    return GradientField(p, q, mask)


def _equations(grads, pitch):
    """Rows ``(a, b, weight, rhs)`` meaning ``weight * (z[a] - z[b]) ~ rhs``."""
    shape = grads.shape
    g = grads.mask.ravel()
    rows = []
    for axis, h, d in ((1, pitch[0], grads.p), (0, pitch[1], grads.q)):
        plus, minus, div = stencil(shape, axis, h)
        ok = g & (div > 0)
        rows.append((plus[ok], minus[ok], 1.0 / div[ok], d.ravel()[ok]))
    return rows


def _coupling(grads, pitch):
    shape = grads.shape
    g = grads.mask
    idx = np.arange(g.size).reshape(shape)
    out = []
    for axis, h, d in ((1, pitch[0], grads.p), (0, pitch[1], grads.q)):
        if axis == 1:
            a, b, ok = idx[:, 1:], idx[:, :-1], g[:, 1:] & g[:, :-1]
            slope = 0.5 * (d[:, 1:] + d[:, :-1])
        else:
            a, b, ok = idx[1:, :], idx[:-1, :], g[1:, :] & g[:-1, :]
            slope = 0.5 * (d[1:, :] + d[:-1, :])
        out.append((a[ok], b[ok], np.full(np.count_nonzero(ok), COUPLING_WEIGHT / h),
                    COUPLING_WEIGHT * slope[ok]))
    return out


def _components(a, b, size):
    adj = sp.coo_matrix((np.ones(a.size), (a, b)), shape=(size, size))
    return connected_components(adj, directed=False)


def integrate_gradients(grads, pitch=(1.0, 1.0), full_output=False):
    """Depth minimizing ``sum (Dx z - p)^2 + (Dy z - q)^2``, zero mean per component.

    Unknowns are every cell some stencil of a masked-in gradient touches.
    """
    pitch = tuple(float(v) for v in np.broadcast_to(np.asarray(pitch, float), (2,)))
    shape = grads.shape
    size = int(np.prod(shape))
    rows = _equations(grads, pitch)
    a = np.concatenate([r[0] for r in rows])
    b = np.concatenate([r[1] for r in rows])
    used = np.zeros(size, dtype=bool)
    used[a] = used[b] = True

    n_main, _ = _components(a, b, size)
    extra = _coupling(grads, pitch)
    ea = np.concatenate([r[0] for r in extra])
    eb = np.concatenate([r[1] for r in extra])
    n_all, _ = _components(np.concatenate([a, ea]), np.concatenate([b, eb]), size)
    if n_all < n_main:
        rows = rows + extra
        a = np.concatenate([r[0] for r in rows])
        b = np.concatenate([r[1] for r in rows])
        used[a] = used[b] = True
    w = np.concatenate([r[2] for r in rows])
    rhs = np.concatenate([r[3] for r in rows])

    z = np.full(size, np.nan)
    labels = np.full(size, -1)
    if a.size == 0:
        info = IntegrationInfo(labels.reshape(shape), 0, 0.0, 0.0)
        depth = DepthGrid(z.reshape(shape), np.zeros(shape, dtype=bool), pitch)
        return (depth, info) if full_output else depth

    cells = np.flatnonzero(used)
    col = np.full(size, -1)
    col[cells] = np.arange(cells.size)
    k = a.size
    D = sp.csr_matrix(
        (np.concatenate([w, -w]), (np.tile(np.arange(k), 2), np.concatenate([col[a], col[b]]))),
        shape=(k, cells.size),
    )
    n_comp, comp = _components(col[a], col[b], cells.size)

    # pin the first cell of every component; the rest is a nonsingular Laplacian
    _, first = np.unique(comp, return_index=True)
    free = np.ones(cells.size, dtype=bool)
    free[first] = False
    L = (D.T @ D).tocsc()
    rhs_n = D.T @ rhs
    Lf = L[free][:, free]
    sol = np.zeros(cells.size)
    if np.any(free):
        sol[free] = spsolve(Lf.tocsc(), rhs_n[free])
        scale = np.linalg.norm(rhs_n[free])
        rel = np.linalg.norm(Lf @ sol[free] - rhs_n[free]) / scale if scale > 0 else 0.0
    else:
        rel = 0.0
    if not rel <= 1e-8:
        raise IntegrationError(f"normal-equation solve stalled at relative residual {rel:.3g}")

    for c in range(n_comp):
        sel = comp == c
        sol[sel] -= sol[sel].mean()

    z[cells] = sol
    labels[cells] = comp
    misfit = D @ sol - rhs
    info = IntegrationInfo(labels.reshape(shape), int(n_comp),
                           float(np.sqrt(np.mean(misfit ** 2))), float(rel))
    mask = np.zeros(size, dtype=bool)
    mask[cells] = True
    depth = DepthGrid(z.reshape(shape), mask.reshape(shape), pitch)
    return (depth, info) if full_output else depth
