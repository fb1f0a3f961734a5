"""Independent reference computations shared by the tests."""

import numpy as np

from bimodal_stereo.lighting import C1, C2, C3, C4, C5


def irradiance(L, n):
    """Second-order irradiance polynomial, expanded term by term; ``L (3, 9)``, ``n (..., 3)``."""
    L = np.asarray(L, dtype=float).reshape(3, 9)
    x, y, z = (n[..., k, None] for k in range(3))
    L1, L2, L3, L4, L5, L6, L7, L8, L9 = L.T
    return (C4 * L1 - C5 * L7 + 2 * C2 * (L4 * x + L2 * y + L3 * z) + C3 * L7 * z * z
            + C1 * L9 * (x * x - y * y) + 2 * C1 * (L5 * x * y + L8 * x * z + L6 * y * z))


def hemisphere_grid(step_deg=1.0):
    """Latitude/longitude grid of unit vectors with ``n3 >= 0``."""
    theta = np.radians(np.arange(0.0, 90.0 + 1e-9, step_deg))
    phi = np.radians(np.arange(0.0, 360.0, step_deg))
    t, p = np.meshgrid(theta, phi, indexing="ij")
    return np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1).reshape(-1, 3)


def pixel_objective(n, S, L, prior=None, prior_weight=1.0, norm_weight=10.0):
    """Sum of squared residuals: brightness, weighted prior pull and unit-norm penalty."""
    n = np.asarray(n, dtype=float)
    r = np.sum((np.asarray(S) - irradiance(L, n)) ** 2, axis=-1)
    if prior is not None:
        r = r + prior_weight * np.sum((n - prior) ** 2, axis=-1)
    return r + norm_weight * (np.sum(n * n, axis=-1) - 1.0) ** 2


def grid_search(S, L, prior=None, step_deg=1.0):
    """Lowest objective over the hemisphere grid and its direction."""
    dirs = hemisphere_grid(step_deg)
    obj = pixel_objective(dirs, S, L, prior)
    k = int(np.argmin(obj))
    return float(obj[k]), dirs[k]


def smooth_surface(size=32, seed=0):
    """A random smooth height field (sum of a few Gaussian bumps and a tilt)."""
    rng = np.random.default_rng(seed)
    rows, cols = np.indices((size, size), dtype=float)
    z = 0.05 * rng.normal() * cols + 0.05 * rng.normal() * rows
    for _ in range(4):
        cu, cv = rng.uniform(0.2, 0.8, size=2) * size
        s = rng.uniform(0.15, 0.35) * size
        z += rng.uniform(-4, 4) * np.exp(-((cols - cu) ** 2 + (rows - cv) ** 2) / (2 * s * s))
    return z
