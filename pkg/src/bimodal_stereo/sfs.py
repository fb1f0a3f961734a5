"""Per-pixel shape from shading under known spherical-harmonics lighting.

Every pixel is an independent 7-residual, 3-unknown least-squares problem:
three brightness residuals (one per colour channel), an optional pull
towards a prior normal, and a soft unit-norm penalty.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import NormalField, UNIT_TOL
from .lighting import SHLighting, shade
from .lm import levenberg_marquardt

CAMERA_FACING = np.array([0.0, 0.0, 1.0])


class ConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class SfsConfig:
    prior_weight: float = 1.0
    norm_weight: float = 10.0
    max_iterations: int = 1000
    residual_tolerance: float = 1e-24
    global_search: bool = True
    seed_spacing_deg: float = 4.0
    n_seeds: int = 6
    seed_separation_deg: float = 15.0
    prior_mask: np.ndarray = None

    def __post_init__(self):
        if self.prior_weight < 0:
            raise ValueError("prior weight must be nonnegative")
        if not self.norm_weight > 0:
            raise ValueError("norm weight must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True, eq=False)
class PriorField:
    """Optional per-pixel prior normal, already expressed in the colour camera frame."""

    n: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.n, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if n.shape != mask.shape + (3,):
            raise ValueError("prior normals must have shape mask.shape + (3,)")
        v = n[mask]
        if v.size and np.max(np.abs(np.linalg.norm(v, axis=1) - 1.0)) > UNIT_TOL:
            raise ValueError("prior normals must have unit length")
        object.__setattr__(self, "n", np.where(mask[..., None], n, np.nan))
        object.__setattr__(self, "mask", mask)

    @classmethod
    def empty(cls, shape):
        return cls(np.full(tuple(shape) + (3,), np.nan), np.zeros(shape, dtype=bool))

    @classmethod
    def from_normals(cls, normals, mask=None):
        m = normals.mask if mask is None else normals.mask & mask
        return cls(normals.n, m)


@dataclass(frozen=True, eq=False)
class SfsResult:
    normals: NormalField
    objective: np.ndarray
    converged: np.ndarray

    @property
    def n_failed(self):
        return int(np.count_nonzero(self.normals.mask & ~self.converged))

    @property
    def mean_objective(self):
        v = self.objective[self.normals.mask]
        return float(v.mean()) if v.size else 0.0


def _forms(lighting):
    return lighting.M if isinstance(lighting, SHLighting) else np.asarray(lighting, dtype=float)


class _Problem:
    """Residuals and Jacobians for a batch of pixels sharing one set of quadratic forms."""

    def __init__(self, M, shading, prior, has_prior, prior_weight, norm_weight):
        self.M = M
        self.Mn = M[:, :3, :3]
        self.Mc = M[:, :3, 3]
        self.S = shading
        self.P = np.where(has_prior[:, None], prior, 0.0)
        self.wp = np.sqrt(prior_weight) * has_prior.astype(float)
        self.wn = np.sqrt(norm_weight)

    def residuals(self, n, idx):
        wp = self.wp[idx]
        rb = self.S[idx] - shade(self.M, n)
        rp = wp[:, None] * (n - self.P[idx])
        rn = self.wn * (np.einsum("ki,ki->k", n, n) - 1.0)
        return np.concatenate([rb, rp, rn[:, None]], axis=1)

    def __call__(self, n, idx):
        r = self.residuals(n, idx)
        k = n.shape[0]
        J = np.empty((k, 7, 3))
        J[:, :3, :] = -2.0 * (np.einsum("jab,kb->kja", self.Mn, n) + self.Mc[None])
        J[:, 3:6, :] = self.wp[idx, None, None] * np.eye(3)
        J[:, 6, :] = 2.0 * self.wn * n
        return r, J

    def objective(self, n, idx):
        r = self.residuals(n, idx)
        return np.einsum("km,km->k", r, r)


def sfs_residuals(n, pixel_log_shading, lighting, prior=None, cfg=SfsConfig()):
    """The seven residuals of one pixel; their squared sum is the pixel objective."""
    n = np.asarray(n, dtype=float).reshape(1, 3)
    has = np.array([prior is not None])
    P = np.zeros((1, 3)) if prior is None else np.asarray(prior, dtype=float).reshape(1, 3)
    prob = _Problem(_forms(lighting), np.asarray(pixel_log_shading, dtype=float).reshape(1, 3),
                    P, has, cfg.prior_weight, cfg.norm_weight)
    return prob.residuals(n, np.array([0]))[0]


def hemisphere_directions(spacing_deg):
    """Quasi-uniform unit vectors with ``n3 >= 0`` (Fibonacci lattice)."""
    step = np.radians(spacing_deg)
    count = int(np.ceil(2.0 * np.pi / step ** 2))
    k = np.arange(count) + 0.5
    z = 1.0 - k / count
    phi = k * np.pi * (3.0 - np.sqrt(5.0))
    r = np.sqrt(1.0 - z * z)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def _diverse_minima(score, near, k):
    """Greedy per-row picks of ``k`` low-score directions, each outside the others' neighbourhoods."""
    score = score.copy()
    rows = np.arange(score.shape[0])
    picks = np.empty((score.shape[0], k), dtype=int)
    for i in range(k):
        j = np.argmin(score, axis=1)
        picks[:, i] = j
        score[near[j]] = np.inf
        score[rows, j] = np.inf
    return picks


def _finalize(n):
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    return np.where(n[:, 2:3] < 0, -n, n)


def solve_normals(shading, lighting, prior=None, has_prior=None, cfg=SfsConfig(), init=None):
    """Batched solve for ``N`` pixels.

    Returns ``(normals (N, 3), objective (N,), converged (N,))``.  The
    objective is evaluated at the returned unit, camera-facing normal.
    """
    S = np.asarray(shading, dtype=float).reshape(-1, 3)
    N = S.shape[0]
    M = _forms(lighting)
    if prior is None:
        prior = np.zeros((N, 3))
        has_prior = np.zeros(N, dtype=bool)
    prior = np.asarray(prior, dtype=float).reshape(N, 3)
    has_prior = np.asarray(has_prior, dtype=bool).reshape(N)
    if init is None:
        init = np.where(has_prior[:, None], prior, CAMERA_FACING)
    init = np.asarray(init, dtype=float).reshape(N, 3)
    if np.any(np.linalg.norm(init, axis=1) == 0):
        raise ValueError("initial normals must be nonzero")
    if N == 0:
        return np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=bool)

    prob = _Problem(M, S, prior, has_prior, cfg.prior_weight, cfg.norm_weight)
    idx = np.arange(N)

    def lm(x0, which):
        sub = _Problem(M, S[which], prior[which], has_prior[which], cfg.prior_weight, cfg.norm_weight)
        return levenberg_marquardt(sub, x0, max_iter=cfg.max_iterations,
                                   cost_tol=cfg.residual_tolerance, max_step=0.5)

    # candidates: the (normalized) start itself and the local solution from it
    start = _finalize(init)
    best = start
    best_obj = prob.objective(start, idx)
    best_conv = best_obj <= cfg.residual_tolerance

    local = lm(init, idx)
    cand = _finalize(local.x)
    obj = prob.objective(cand, idx)
    better = obj < best_obj
    best = np.where(better[:, None], cand, best)
    best_obj = np.where(better, obj, best_obj)
    best_conv = np.where(better, local.converged, best_conv)

    if cfg.global_search:
        todo = np.flatnonzero(best_obj > cfg.residual_tolerance)
        if todo.size:
            dirs = hemisphere_directions(cfg.seed_spacing_deg)
            grid_shade = shade(M, dirs)
            near = dirs @ dirs.T >= np.cos(np.radians(cfg.seed_separation_deg))
            k = min(cfg.n_seeds, dirs.shape[0])
            for chunk in np.array_split(todo, max(1, todo.size // 256)):
                rb = S[chunk, None, :] - grid_shade[None]
                score = np.einsum("kgj,kgj->kg", rb, rb)
                hp = has_prior[chunk]
                score += (cfg.prior_weight * hp)[:, None] * (2.0 - 2.0 * prior[chunk] @ dirs.T)
                seeds = _diverse_minima(score, near, k)
                x0 = dirs[seeds].reshape(-1, 3)
                which = np.repeat(chunk, k)
                res = lm(x0, which)
                cand = _finalize(res.x)
                obj = prob.objective(cand, which).reshape(-1, k)
                pick = np.argmin(obj, axis=1)
                rows = np.arange(chunk.size)
                obj = obj[rows, pick]
                cand = cand.reshape(-1, k, 3)[rows, pick]
                conv = res.converged.reshape(-1, k)[rows, pick]
                better = obj < best_obj[chunk]
                best[chunk] = np.where(better[:, None], cand, best[chunk])
                best_obj[chunk] = np.where(better, obj, best_obj[chunk])
                best_conv[chunk] = np.where(better, conv, best_conv[chunk])

    converged = best_conv | (best_obj <= cfg.residual_tolerance)
    return best, best_obj, converged


def solve_pixel(pixel_log_shading, lighting, prior=None, cfg=SfsConfig(), init=None, full_output=False):
    """Unit normal of one pixel; warns when the iteration cap is hit."""
    has = np.array([prior is not None])
    P = None if prior is None else np.asarray(prior, dtype=float).reshape(1, 3)
    x0 = None if init is None else np.asarray(init, dtype=float).reshape(1, 3)
    n, obj, conv = solve_normals(np.asarray(pixel_log_shading, dtype=float).reshape(1, 3),
                                 lighting, P, has if P is not None else None, cfg, x0)
    if not conv[0]:
        warnings.warn("pixel solve hit the iteration cap; keeping the best iterate", ConvergenceWarning)
    if full_output:
        return n[0], float(obj[0]), bool(conv[0])
    return n[0]


def solve_field(shading, lighting, priors=None, cfg=SfsConfig(), init=None):
    """Apply the pixel solver to every masked-in pixel of ``shading``."""
    shape = shading.shape
    if priors is None:
        priors = PriorField.empty(shape)
    if priors.mask.shape != shape:
        raise ValueError("shading and priors must share dimensions")
    use = priors.mask & shading.mask
    if cfg.prior_mask is not None:
        use &= np.asarray(cfg.prior_mask, dtype=bool)
    m = shading.mask
    S = shading.values[m]
    P = np.where(use[..., None], priors.n, 0.0)[m]
    x0 = None if init is None else np.asarray(init, dtype=float)[m]
    n, obj, conv = solve_normals(S, lighting, P, use[m], cfg, x0)

    out = np.full(shape + (3,), np.nan)
    out[m] = n
    objective = np.full(shape, np.nan)
    objective[m] = obj
    converged = np.zeros(shape, dtype=bool)
    converged[m] = conv
    result = SfsResult(NormalField(out, m), objective, converged)
    if result.n_failed:
        warnings.warn(f"{result.n_failed} pixels hit the iteration cap", ConvergenceWarning)
    return result
