"""Second-order spherical-harmonics Lambertian shading in the log domain.

Coefficients are 27 numbers, channel-major: ``L[j, k]`` is coefficient
``k + 1`` of channel ``j`` with the order DC, three linear terms, five
quadratic terms (``L00, L1-1, L10, L11, L2-2, L2-1, L20, L21, L22``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import LogShadingImage

C1 = 0.429043
C2 = 0.511664
C3 = 0.743125
C4 = 0.886227
C5 = 0.247708

# Grace Cathedral light probe; channels differ enough for the
# per-pixel three-channel problem to be well conditioned.
STANDARD_LIGHTING = np.array([
    [0.79, 0.39, -0.34, -0.29, -0.11, -0.26, -0.16, 0.56, 0.21],
    [0.44, 0.35, -0.18, -0.06, -0.05, -0.22, -0.09, 0.21, -0.05],
    [0.54, 0.60, -0.27, 0.01, -0.12, -0.47, -0.15, 0.14, -0.30],
])


def quadratic_form(L):
    """The 4x4 symmetric matrix of one channel from its 9 coefficients."""
    L1, L2, L3, L4, L5, L6, L7, L8, L9 = L
    return np.array([
        [C1 * L9, C1 * L5, C1 * L8, C2 * L4],
        [C1 * L5, -C1 * L9, C1 * L6, C2 * L2],
        [C1 * L8, C1 * L6, C3 * L7, C2 * L3],
        [C2 * L4, C2 * L2, C2 * L3, C4 * L1 - C5 * L7],
    ])


@dataclass(frozen=True, eq=False)
class SHLighting:
    L: np.ndarray  # (3, 9)
    M: np.ndarray  # (3, 4, 4)

    @property
    def vector(self):
        return self.L.ravel()


def build_m_matrices(L):
    L = np.asarray(L, dtype=float)
    if L.size != 27:
        raise ValueError(f"expected 27 lighting coefficients, got {L.size}")
    if not np.all(np.isfinite(L)):
        raise ValueError("lighting coefficients must be finite")
    L = L.reshape(3, 9).copy()
    M = np.stack([quadratic_form(row) for row in L])
    L.setflags(write=False)
    M.setflags(write=False)
    return SHLighting(L, M)


def shade(M, n):
    """``[n, 1]^T M_j [n, 1]`` for normals ``(..., 3)``; returns ``(..., 3)``."""
    n = np.asarray(n, dtype=float)
    nh = np.concatenate([n, np.ones(n.shape[:-1] + (1,))], axis=-1)
    return np.einsum("...a,jab,...b->...j", nh, M, nh)


def render_log_shading(lighting, normals):
    values = shade(lighting.M, np.where(normals.mask[..., None], normals.n, 0.0))
    return LogShadingImage(values, normals.mask)


def rotated_forms(M, R):
    """Quadratic forms that shade depth-frame normals after rotating them by ``R``.

    ``[R n, 1]^T M [R n, 1] == [n, 1]^T M' [n, 1]``.
    """
    B = np.eye(4)
    B[:3, :3] = R
    return np.einsum("ia,jab,bk->jik", B.T, M, B)


@dataclass(frozen=True, eq=False)
class LightingPrior:
    mean: np.ndarray
    precision: np.ndarray
    weight: float = 0.0

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        P = np.asarray(self.precision, dtype=float)
        if P.shape != (mean.size, mean.size):
            raise ValueError("precision must be square and match the mean")
        if np.max(np.abs(P - P.T), initial=0.0) > 1e-9:
            raise ValueError("precision must be symmetric")
        if np.min(np.linalg.eigvalsh(0.5 * (P + P.T))) < -1e-9:
            raise ValueError("precision must be positive semidefinite")
        if self.weight < 0:
            raise ValueError("prior weight must be nonnegative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision", P)

    @classmethod
    def disabled(cls, size=27):
        return cls(np.zeros(size), np.eye(size), 0.0)


def lighting_prior_cost(prior, L):
    L = np.asarray(L, dtype=float).ravel()
    if L.size != prior.mean.size:
        raise ValueError(f"expected {prior.mean.size} coefficients, got {L.size}")
    d = L - prior.mean
    return float(max(prior.weight * d @ prior.precision @ d, 0.0))


def load_lighting(path):
    """27 numbers from JSON (list, nested list or ``{"L": ...}``) or whitespace/comma text."""
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = [float(v) for v in text.replace(",", " ").split()]
    if isinstance(data, dict):
        data = data["L"]
    return build_m_matrices(np.asarray(data, dtype=float))


def save_lighting(path, lighting):
    with open(path, "w") as fh:
        json.dump({"L": [float(v) for v in lighting.vector]}, fh, indent=1)
        fh.write("\n")
