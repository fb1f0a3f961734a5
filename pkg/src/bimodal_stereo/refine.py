"""Shading-based refinement of the depth view on its overlap with the colour view.

The depth-view normal ``n`` of a corresponded pixel is re-solved with the
same per-pixel problem as shape from shading: its brightness is evaluated at
``R n`` against the colour pixel it maps to, and the pull goes towards the
colour-view estimate rotated back, ``R^T n*``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import DepthGrid, NormalField
from .integrate import integrate_gradients, normals_to_gradients
from .lighting import rotated_forms, shade
from .registration import CorrespondenceSet
from .sfs import ConvergenceWarning, SfsConfig, _forms, solve_normals


@dataclass(frozen=True)
class RefineConfig:
    prior_weight: float = 1.0  # lambda_g2
    norm_weight: float = 10.0  # lambda_g3
    max_iterations: int = 1000
    residual_tolerance: float = 1e-24
    global_search: bool = True
    fill_holes: bool = True

    def __post_init__(self):
        if self.prior_weight < 0:
            raise ValueError("prior weight must be nonnegative")
        if not self.norm_weight > 0:
            raise ValueError("norm weight must be positive")

    def sfs(self):
        return SfsConfig(self.prior_weight, self.norm_weight, self.max_iterations,
                         self.residual_tolerance, self.global_search)


@dataclass(frozen=True, eq=False)
class RefineResult:
    normals: NormalField
    region: np.ndarray  # depth pixels whose normal was re-solved
    objective: np.ndarray
    converged: np.ndarray

    @property
    def n_failed(self):
        return int(np.count_nonzero(self.region & ~self.converged))


def pixel_pairs(corr):
    """Unique ``(depth pixel, colour pixel)`` pairs, closest partner first."""
    h = np.asarray(corr.source_pixel)
    i = np.asarray(corr.target_pixel)
    if np.any(h < 0) or np.any(i < 0):
        raise ValueError("correspondences carry no pixel indices")
    order = np.lexsort((corr.distance, h))
    h, i = h[order], i[order]
    first = np.ones(h.size, dtype=bool)
    first[1:] = h[1:] != h[:-1]
    return h[first], i[first]


def hole_pairs(depth, pose, target_cloud, threshold, region):
    """Colour partners for depth-grid holes enclosed by ``region``.

    A hole cell gets the mean depth of its valid 8-neighbours (repeated
    until the enclosed holes are covered), is carried through ``pose`` and
    paired with the nearest colour point closer than ``threshold``.
    """
    from scipy.spatial import cKDTree

    holes = ndimage.binary_fill_holes(region) & ~depth.mask
    if not np.any(holes) or len(target_cloud) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    z = np.where(depth.mask, depth.z, np.nan)
    todo = holes.copy()
    kernel = np.ones((3, 3))
    while np.any(todo):
        known = np.isfinite(z)
        cnt = ndimage.convolve(known.astype(float), kernel, mode="constant")
        tot = ndimage.convolve(np.where(known, z, 0.0), kernel, mode="constant")
        step = todo & (cnt > 0)
        if not np.any(step):
            break
        z[step] = tot[step] / cnt[step]
        todo &= ~step
    cells = np.flatnonzero((holes & np.isfinite(z)).ravel())
    rows, cols = np.divmod(cells, depth.shape[1])
    pts = np.column_stack([cols * depth.pitch[0], rows * depth.pitch[1], z.ravel()[cells]])
    d, j = cKDTree(target_cloud.points).query(pose.transform(pts))
    ok = d < threshold
    return cells[ok], target_cloud.index[j[ok]]


def refine_normals(n_R, shading, lighting, pose, corr, n_est, cfg=RefineConfig(), extra_pairs=None):
    """Re-solve depth-view normals at corresponded pixels; everything else is untouched.

    ``extra_pairs`` adds ``(depth pixel, colour pixel)`` arrays for cells the
    depth view is missing (holes).  A pixel keeps its input normal when the
    solve would worsen its brightness fit.
    """
    shape = n_R.shape
    region = np.zeros(shape, dtype=bool)
    objective = np.full(shape, np.nan)
    converged = np.zeros(shape, dtype=bool)
    if corr is None or len(corr) == 0:
        h = i = np.zeros(0, dtype=int)
    else:
        h, i = pixel_pairs(corr)
    if extra_pairs is not None and len(extra_pairs[0]):
        known = np.zeros(n_R.mask.size, dtype=bool)
        known[h] = True
        eh, ei = (np.asarray(a, dtype=int) for a in extra_pairs)
        new = ~known[eh]
        h, i = np.concatenate([h, eh[new]]), np.concatenate([i, ei[new]])

    nm = n_R.mask.ravel()
    ok = shading.mask.ravel()[i] & n_est.mask.ravel()[i]
    h, i = h[ok], i[ok]
    if h.size == 0:
        return RefineResult(n_R, region, objective, converged)

    R = pose.R
    S = shading.values.reshape(-1, 3)[i]
    prior = n_est.n.reshape(-1, 3)[i] @ R  # R^T n* per row
    prior /= np.linalg.norm(prior, axis=1, keepdims=True)
    had = nm[h]
    current = np.where(had[:, None], np.nan_to_num(n_R.n.reshape(-1, 3)[h]), prior)
    init = current.copy()
    # a pulled-back prior facing away from the depth camera is a poor start
    init[~had & (init[:, 2] <= 0)] = (0.0, 0.0, 1.0)
    Mr = rotated_forms(_forms(lighting), R)
    n, obj, conv = solve_normals(S, Mr, prior, np.ones(h.size, dtype=bool), cfg.sfs(), init)

    # never trade away brightness consistency of an existing normal
    before = np.sum((S - shade(Mr, current)) ** 2, axis=1)
    after = np.sum((S - shade(Mr, n)) ** 2, axis=1)
    keep = had & (after > before)
    n[keep] = current[keep]
    conv[keep] = True

    out = np.where(n_R.mask[..., None], n_R.n, np.nan).reshape(-1, 3)
    out[h] = n
    mask = nm.copy()
    mask[h] = True
    region.ravel()[h] = True
    objective.ravel()[h] = obj
    converged.ravel()[h] = conv
    failed = int(np.count_nonzero(~conv))
    if failed:
        warnings.warn(f"{failed} refined pixels hit the iteration cap", ConvergenceWarning)
    return RefineResult(NormalField(out.reshape(shape + (3,)), mask.reshape(shape)),
                        region, objective, converged)


def refine_depth(normals, z_R, region=None):
    """Re-integrate ``region`` from ``normals`` and splice it into ``z_R``.

    Each connected piece is shifted so its mean over the cells it shares
    with ``z_R`` matches ``z_R`` there; pieces sharing no cell are dropped.
    """
    if normals.shape != z_R.shape:
        raise ValueError("normals and depth must share dimensions")
    region = normals.mask if region is None else np.asarray(region, dtype=bool) & normals.mask
    if not np.any(region):
        return z_R
    grads = normals_to_gradients(NormalField(np.where(region[..., None], normals.n, np.nan), region))
    est, info = integrate_gradients(grads, z_R.pitch, full_output=True)
    z = np.where(z_R.mask, z_R.z, np.nan)
    mask = z_R.mask.copy()
    for c in range(info.n_components):
        cells = info.labels == c
        shared = cells & z_R.mask
        if not np.any(shared):
            continue
        offset = np.mean(z_R.z[shared]) - np.mean(est.z[shared])
        z[cells] = est.z[cells] + offset
        mask |= cells
    return DepthGrid(z, mask, z_R.pitch)
