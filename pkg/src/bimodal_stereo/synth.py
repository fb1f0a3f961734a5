"""Synthetic colour/depth pairs with known pose, and pose-accuracy sweeps.

The colour view is an orthographic log-shading rendering of a source depth
map.  The depth view sees the same surface under a similarity transform,
re-rasterized onto the source grid, clipped to a column band and optionally
subsampled.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .core import DepthGrid, SimilarityPose, depth_to_normals, depth_to_pointcloud, euler_to_matrix
from .lighting import STANDARD_LIGHTING, build_m_matrices, render_log_shading
from .registration import RegistrationError, rotation_error

log = logging.getLogger(__name__)

SWEEP_BETAS = (20.0, 40.0, 60.0, 80.0, 90.0)
SWEEP_OVERLAPS = (0.125, 0.25, 0.375, 0.5, 1.0)
# sensor noise of the sweep's depth view; without it every cell sits at the
# solver's round-off floor and the sweep says nothing about overlap
SWEEP_DEPTH_NOISE = 0.05


def face_surface(size=32, pitch=1.0):
    """Smooth face-like height field (zero mean), slopes up to about 45 degrees."""
    c = (size - 1) / 2.0
    r, k = np.indices((size, size))
    u = (k - c) / (size / 2.0)
    v = (r - c) / (size / 2.0)

    def bump(du, dv, su, sv):
        return np.exp(-0.5 * ((u - du) ** 2 / su ** 2 + (v - dv) ** 2 / sv ** 2))

    z = (7.0 * bump(0.0, 0.05, 0.55, 0.7)  # head
         + 2.2 * bump(0.02, 0.05, 0.14, 0.28)  # nose
         + 0.9 * bump(0.0, -0.38, 0.45, 0.09)  # brow
         - 1.2 * bump(-0.32, -0.2, 0.13, 0.09)
         - 1.2 * bump(0.34, -0.2, 0.13, 0.09)  # eye sockets
         + 0.7 * bump(0.0, 0.5, 0.22, 0.07)  # lips
         + 0.9 * bump(0.03, 0.78, 0.2, 0.12)  # chin
         + 0.5 * bump(-0.5, 0.1, 0.12, 0.25)
         + 0.5 * bump(0.55, 0.1, 0.12, 0.25))  # cheeks
    # the grid spans size pixels, so scale heights with the pitch
    z = (z - z.mean()) * (size / 32.0) * float(pitch)
    return DepthGrid(z, pitch=(pitch, pitch))


def standard_lighting():
    return build_m_matrices(STANDARD_LIGHTING)


@dataclass(frozen=True, eq=False)
class SynthSpec:
    source: DepthGrid = field(default_factory=face_surface)
    lighting: object = None  # SHLighting; None means the standard lighting
    angles: tuple = (0.0, 20.0, 0.0)  # (alpha, beta, gamma) degrees
    overlap: float = 1.0  # P_w
    stride: int = 1
    prior_percentage: float = 1.0  # P_er
    seed: int = 0
    depth_noise: float = 0.0
    raster: str = "mesh"  # or "splat"

    def __post_init__(self):
        if not 0.0 < self.overlap <= 1.0:
            raise ValueError("overlap must lie in (0, 1]")
        if not 0.0 <= self.prior_percentage <= 1.0:
            raise ValueError("prior percentage must lie in [0, 1]")
        if not np.all(np.isfinite(self.angles)) or len(self.angles) != 3:
            raise ValueError("angles must be three finite numbers")
        if int(self.stride) != self.stride or self.stride < 1:
            raise ValueError("stride must be a positive integer")
        if self.depth_noise < 0:
            raise ValueError("depth noise must be nonnegative")
        if self.raster not in ("mesh", "splat"):
            raise ValueError("raster must be 'mesh' or 'splat'")
        if self.lighting is None:
            object.__setattr__(self, "lighting", standard_lighting())


class SyntheticPair(NamedTuple):
    shading: object  # LogShadingImage in the colour view
    depth: DepthGrid  # the depth view
    pose: SimilarityPose  # maps depth-view points onto colour-view points
    normals: object  # true NormalField in the colour view


def ground_truth_pose(source, angles, s=1.0):
    """Rotation about the centroid of the source cloud, depth view -> colour view."""
    c = depth_to_pointcloud(source).points.mean(axis=0)
    R = euler_to_matrix(*angles)
    return SimilarityPose(s, R, c - s * R @ c)


def _triangles(points, valid):
    """Two triangles per quad of valid grid vertices; returns ``(T, 3, 3)``."""
    a, b = points[:-1, :-1], points[:-1, 1:]
    c, d = points[1:, :-1], points[1:, 1:]
    va, vb = valid[:-1, :-1], valid[:-1, 1:]
    vc, vd = valid[1:, :-1], valid[1:, 1:]
    t1 = np.stack([a, b, c], axis=-2)[va & vb & vc]
    t2 = np.stack([d, c, b], axis=-2)[vd & vc & vb]
    return np.concatenate([t1, t2])


def rasterize_mesh(points, valid, shape, pitch=(1.0, 1.0), eps=1e-9):
    """Z-buffer (largest z wins) of the triangulated vertex grid at every cell centre."""
    h, w = shape
    tri = _triangles(points, valid)
    zbuf = np.full(h * w, -np.inf)
    if tri.shape[0]:
        x = tri[..., 0] / pitch[0]
        y = tri[..., 1] / pitch[1]
        z = tri[..., 2]
        area = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
        keep = np.abs(area) > 1e-12
        x, y, z, area = x[keep], y[keep], z[keep], area[keep]
        c0 = np.maximum(np.ceil(x.min(axis=1) - eps), 0).astype(int)
        c1 = np.minimum(np.floor(x.max(axis=1) + eps), w - 1).astype(int)
        r0 = np.maximum(np.ceil(y.min(axis=1) - eps), 0).astype(int)
        r1 = np.minimum(np.floor(y.max(axis=1) + eps), h - 1).astype(int)
        span_c = int(np.max(c1 - c0, initial=-1)) + 1
        span_r = int(np.max(r1 - r0, initial=-1)) + 1
        for dc in range(span_c):
            for dr in range(span_r):
                cc, rr = c0 + dc, r0 + dr
                ok = (cc <= c1) & (rr <= r1)
                w0 = ((x[:, 1] - cc) * (y[:, 2] - rr) - (x[:, 2] - cc) * (y[:, 1] - rr)) / area
                w1 = ((x[:, 2] - cc) * (y[:, 0] - rr) - (x[:, 0] - cc) * (y[:, 2] - rr)) / area
                w2 = 1.0 - w0 - w1
                ok &= (w0 >= -eps) & (w1 >= -eps) & (w2 >= -eps)
                zz = w0 * z[:, 0] + w1 * z[:, 1] + w2 * z[:, 2]
                np.maximum.at(zbuf, rr[ok] * w + cc[ok], zz[ok])
    zbuf = zbuf.reshape(shape)
    mask = np.isfinite(zbuf)
    return np.where(mask, zbuf, np.nan), mask


def rasterize_splat(points, valid, shape, pitch=(1.0, 1.0)):
    """Nearest-cell z-buffer, then a 3x3 median fill of cells with at most two empty neighbours."""
    h, w = shape
    p = points[valid]
    cc = np.rint(p[:, 0] / pitch[0]).astype(int)
    rr = np.rint(p[:, 1] / pitch[1]).astype(int)
    ok = (cc >= 0) & (cc < w) & (rr >= 0) & (rr < h)
    zbuf = np.full(h * w, -np.inf)
    np.maximum.at(zbuf, rr[ok] * w + cc[ok], p[ok, 2])
    z = np.where(np.isfinite(zbuf), zbuf, np.nan).reshape(shape)
    pad = np.pad(z, 1, constant_values=np.nan)
    nb = np.stack([pad[1 + i:h + 1 + i, 1 + j:w + 1 + j]
                   for i in (-1, 0, 1) for j in (-1, 0, 1) if i or j])
    fill = np.isnan(z) & (np.sum(np.isfinite(nb), axis=0) >= 6)
    if np.any(fill):
        z[fill] = np.nanmedian(nb[:, fill], axis=0)
    return z, np.isfinite(z)


def clip_columns(mask, fraction):
    """Contiguous column band around the footprint centroid holding ``fraction`` of its cells."""
    counts = mask.sum(axis=0)
    total = counts.sum()
    if total == 0:
        return np.zeros_like(mask)
    if fraction >= 1.0:
        return mask.copy()
    cols = np.arange(mask.shape[1])
    centre = np.sum(cols * counts) / total
    order = np.argsort(np.abs(cols - centre) + 1e-9 * cols, kind="stable")
    cum = np.cumsum(counts[order])
    target = fraction * total
    k = int(np.searchsorted(cum, target))
    # take whichever prefix lands closer to the target
    if k > 0 and abs(cum[k - 1] - target) <= abs(cum[min(k, cum.size - 1)] - target):
        k -= 1
    band = np.zeros(mask.shape[1], dtype=bool)
    band[order[:k + 1]] = True
    return mask & band[None, :]


def synthesize_pair(spec=None):
    """Render the colour view and rasterize the transformed depth view.

    The returned pose maps depth-view points to colour-view points, so
    ``pose.inverse()`` carries the source cloud into the depth view.
    """
    spec = SynthSpec() if spec is None else spec
    source = spec.source
    normals = depth_to_normals(source)
    shading = render_log_shading(spec.lighting, normals)

    pose = ground_truth_pose(source, spec.angles)
    cloud = depth_to_pointcloud(source)
    pts = np.full(source.shape + (3,), np.nan)
    pts.reshape(-1, 3)[cloud.index] = pose.inverse().transform(cloud.points)
    raster = rasterize_mesh if spec.raster == "mesh" else rasterize_splat
    z, mask = raster(pts, source.mask, source.shape, source.pitch)
    mask = clip_columns(mask, spec.overlap)
    if spec.depth_noise > 0:
        rng = np.random.default_rng(spec.seed)
        z = z + rng.normal(scale=spec.depth_noise, size=z.shape)
    st = int(spec.stride)
    z, mask = z[::st, ::st], mask[::st, ::st]
    if np.count_nonzero(mask) < 4:
        raise ValueError("the clipped depth view has no usable overlap")
    depth = DepthGrid(np.where(mask, z, np.nan), mask, (source.pitch[0] * st, source.pitch[1] * st))
    return SyntheticPair(shading, depth, pose, normals)


def select_prior_pixels(mask, fraction, seed=0):
    """``round(fraction * count)`` masked-in pixels chosen uniformly at random.

    Subsets for one seed are nested: a larger fraction keeps every pixel a
    smaller one picked.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    mask = np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(mask)
    k = int(round(fraction * idx.size))
    pick = np.random.default_rng(seed).permutation(idx.size)[:k]
    out = np.zeros(mask.size, dtype=bool)
    out[idx[pick]] = True
    return out.reshape(mask.shape)


def cell_seed(seed, beta, overlap):
    """Deterministic per-cell seed from the sweep seed and the cell coordinates."""
    ss = np.random.SeedSequence([int(seed), int(round(beta * 1000)) % 2 ** 32,
                                 int(round(overlap * 1e6))])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True, eq=False)
class SweepResult:
    betas: tuple
    overlaps: tuple
    errors: np.ndarray  # (len(betas), len(overlaps)); NaN where the run failed
    failed: np.ndarray
    iterations: np.ndarray
    messages: dict

    def cell(self, beta, overlap):
        i = self.betas.index(beta)
        j = self.overlaps.index(overlap)
        return (None if self.failed[i, j] else float(self.errors[i, j]))

    def to_dict(self):
        cells = []
        for i, b in enumerate(self.betas):
            for j, p in enumerate(self.overlaps):
                cells.append({
                    "beta_deg": b, "overlap": p,
                    "rotation_error": None if self.failed[i, j] else float(self.errors[i, j]),
                    "failed": bool(self.failed[i, j]),
                    "iterations": int(self.iterations[i, j]),
                    "message": self.messages.get((b, p), ""),
                })
        return {"betas": list(self.betas), "overlaps": list(self.overlaps), "cells": cells}


def run_sweep(source=None, lighting=None, betas=SWEEP_BETAS, overlaps=SWEEP_OVERLAPS,
              cfg=None, seed=0, stride=1, depth_noise=SWEEP_DEPTH_NOISE):
    """Run the full pipeline for every ``(beta, overlap)`` cell.

    Cells whose pipeline raises (registration failure, empty overlap,
    integration breakdown) are marked failed instead of aborting the sweep.
    """
    from .integrate import IntegrationError
    from .pipeline import PipelineConfig, run_bimodal_stereo

    source = face_surface() if source is None else source
    lighting = standard_lighting() if lighting is None else lighting
    cfg = PipelineConfig() if cfg is None else cfg
    betas = tuple(float(b) for b in betas)
    overlaps = tuple(float(p) for p in overlaps)
    if not betas or not overlaps:
        raise ValueError("sweep lists must be nonempty")
    errors = np.full((len(betas), len(overlaps)), np.nan)
    failed = np.zeros(errors.shape, dtype=bool)
    iterations = np.zeros(errors.shape, dtype=int)
    messages = {}
    for i, b in enumerate(betas):
        for j, p in enumerate(overlaps):
            cs = cell_seed(seed, b, p)
            try:
                pair = synthesize_pair(SynthSpec(source, lighting, (0.0, b, 0.0), p, stride,
                                                 seed=cs, depth_noise=depth_noise))
                res = run_bimodal_stereo(pair.shading, pair.depth, lighting, replace(cfg, seed=cs))
                errors[i, j] = rotation_error(res.pose.R, pair.pose.R)
                iterations[i, j] = len(res.trace)
            except (RegistrationError, IntegrationError, ValueError) as exc:
                failed[i, j] = True
                messages[(b, p)] = f"{type(exc).__name__}: {exc}"
                iterations[i, j] = len(getattr(exc, "trace", ()))
            log.info("sweep beta=%g overlap=%g err=%s", b, p,
                     "FAIL" if failed[i, j] else f"{errors[i, j]:.6f}")
    return SweepResult(betas, overlaps, errors, failed, iterations, messages)
