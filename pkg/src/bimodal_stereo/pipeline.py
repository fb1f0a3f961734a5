"""Alternating shape-from-shading, integration, registration and refinement.

Every outer iteration solves the colour view's normals (with priors carried
over from the depth view after the first pass), integrates them to a depth
map, registers the depth-view cloud onto it, and refines the depth view on
the overlap.  The loop stops once the rotation settles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .core import NormalField, SimilarityPose, depth_to_normals, depth_to_pointcloud
from .integrate import integrate_gradients, normals_to_gradients
from .refine import RefineConfig, hole_pairs, pixel_pairs, refine_depth, refine_normals
from .registration import RansacConfig, RegistrationConfig, RegistrationError, MeshSurface, register
from .sfs import PriorField, SfsConfig, solve_field

log = logging.getLogger(__name__)


class PipelineRegistrationError(RegistrationError):
    """Registration failed inside the loop; ``trace`` holds the completed iterations."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class PipelineConfig:
    threshold: float = 1e-3  # on the Frobenius change of R between iterations
    max_iterations: int = 50
    min_iterations: int = 2
    divergence_patience: int = 5
    sfs: SfsConfig = field(default_factory=SfsConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    prior_percentage: float = None  # P_er; None keeps every prior pixel
    seed: int = 0
    surface_matching: bool = True  # polish the pose against the continuous shading surface
    refine_enabled: bool = True
    literal_algorithm: bool = False  # priors from the unrefined depth-view normals

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.min_iterations < 1:
            raise ValueError("min_iterations must be >= 1")
        if self.prior_percentage is not None and not 0.0 <= self.prior_percentage <= 1.0:
            raise ValueError("prior percentage must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class PipelineState:
    k: int
    normals: NormalField  # colour view, n^(k)
    depth: object  # colour view, z^(k)
    pose: SimilarityPose  # T^(k), depth view -> colour view
    depth_refined: object  # z_R^(k)
    normals_refined: NormalField
    correspondences: object
    metrics: dict


@dataclass(frozen=True, eq=False)
class PipelineResult:
    normals: NormalField
    depth: object
    pose: SimilarityPose
    depth_refined: object
    trace: list
    converged: bool
    stop_reason: str
    state: PipelineState

    def __iter__(self):
        return iter((self.normals, self.depth, self.pose, self.depth_refined, self.trace))


def transfer_priors(corr, normals, pose, shape):
    """Depth-view normals rotated into the colour view at corresponded colour pixels.

    When several depth pixels land on one colour pixel the closest pair wins.
    """
    n = np.full(shape + (3,), np.nan)
    mask = np.zeros(shape, dtype=bool)
    if corr is None or len(corr) == 0:
        return PriorField(n, mask)
    order = np.lexsort((corr.distance, corr.target_pixel))
    i = corr.target_pixel[order]
    h = corr.source_pixel[order]
    first = np.ones(i.size, dtype=bool)
    first[1:] = i[1:] != i[:-1]
    i, h = i[first], h[first]
    ok = normals.mask.ravel()[h]
    i, h = i[ok], h[ok]
    v = normals.n.reshape(-1, 3)[h] @ pose.R.T
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    n.reshape(-1, 3)[i] = v
    mask.ravel()[i] = True
    return PriorField(n, mask)


def _registration_config(cfg):
    reg = cfg.registration
    return replace(reg, ransac=replace(reg.ransac, seed=cfg.seed))


def run_bimodal_stereo(shading, z_R, lighting, cfg=PipelineConfig()):
    """Estimate colour-view shape, the depth->colour similarity and a refined depth view.

    Returns a :class:`PipelineResult`, which also unpacks as
    ``(normals, depth, pose, depth_refined, trace)``.
    """
    from .synth import select_prior_pixels

    if np.count_nonzero(shading.mask) < 4:
        raise ValueError("shading image has fewer than 4 valid pixels")
    n_R0 = depth_to_normals(z_R)
    source = depth_to_pointcloud(z_R)
    reg_cfg = _registration_config(cfg)

    n_R = n_R0
    zR_k = z_R
    priors = None
    pose_prev = None
    R_prev = np.eye(3)
    trace = []
    best = None
    rising = 0
    last_delta = np.inf
    stop = "iteration cap"
    converged = False

    for k in range(1, cfg.max_iterations + 1):
        sfs_cfg = cfg.sfs
        if priors is not None and cfg.prior_percentage is not None:
            keep = select_prior_pixels(shading.mask, cfg.prior_percentage, cfg.seed)
            sfs_cfg = replace(sfs_cfg, prior_mask=keep)
        sfs = solve_field(shading, lighting, priors, sfs_cfg)
        z_k = integrate_gradients(normals_to_gradients(sfs.normals), z_R.pitch)
        target = depth_to_pointcloud(z_k)
        try:
            fine = MeshSurface(z_k) if cfg.surface_matching else None
            reg = register(source, target, reg_cfg, init=pose_prev, fine_target=fine)
        except RegistrationError as exc:
            raise PipelineRegistrationError(f"iteration {k}: {exc}", trace) from exc
        pose = reg.pose
        corr = reg.correspondences

        if cfg.refine_enabled and len(corr):
            h, _ = pixel_pairs(corr)
            region = np.zeros(z_R.shape, dtype=bool)
            region.ravel()[h] = True
            extra = hole_pairs(z_R, pose, target, reg_cfg.correspondence_threshold, region) \
                if cfg.refine.fill_holes else None
            ref = refine_normals(n_R0, shading, lighting, pose, corr, sfs.normals, cfg.refine, extra)
            n_ref = ref.normals
            zR_k = refine_depth(n_ref, z_R, ref.region)
        else:
            n_ref = n_R0
            zR_k = z_R
        n_R = n_R0 if cfg.literal_algorithm else n_ref
        priors = transfer_priors(corr, n_R, pose, shading.shape)

        delta = float(np.linalg.norm(pose.R - R_prev))
        a, b, g = pose.euler
        metrics = {
            "k": k,
            "rot_delta": delta,
            "alpha_deg": a,
            "beta_deg": b,
            "gamma_deg": g,
            "scale": pose.s,
            "inliers": reg.inliers,
            "correspondences": len(corr),
            "sfs_mean_residual": sfs.mean_objective,
            "sfs_failed": sfs.n_failed,
        }
        trace.append(metrics)
        log.info("iteration %d: delta=%.3g beta=%.4f inliers=%d", k, delta, b, reg.inliers)
        state = PipelineState(k, sfs.normals, z_k, pose, zR_k, n_ref, corr, metrics)
        if best is None or delta < best.metrics["rot_delta"]:
            best = state

        R_prev = pose.R
        pose_prev = pose
        if k >= cfg.min_iterations and delta < cfg.threshold:
            stop, converged, best = "converged", True, state
            break
        rising = rising + 1 if delta > last_delta else 0
        last_delta = delta
        if rising >= cfg.divergence_patience:
            stop = "diverging"
            break

    final = best if stop == "diverging" else state
    return PipelineResult(final.normals, final.depth, final.pose, final.depth_refined,
                          trace, converged, stop, final)
