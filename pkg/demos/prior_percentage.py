"""
How much does the shape prior help shape from shading?
======================================================

The per-pixel solver is run on the same shaded surface while a growing
fraction of pixels receives the true normal as a prior.  The mean angular
error falls as the fraction grows; without any prior the solver relies on
the three colour channels alone.
"""

import warnings

import numpy as np

from bimodal_stereo.core import angular_error, depth_to_normals
from bimodal_stereo.lighting import build_m_matrices, render_log_shading
from bimodal_stereo.sfs import PriorField, SfsConfig, solve_field
from bimodal_stereo.synth import face_surface, select_prior_pixels, standard_lighting

warnings.simplefilter("ignore")

surface = face_surface(32)
lighting = standard_lighting()
truth = depth_to_normals(surface)
shading = render_log_shading(lighting, truth)
priors = PriorField.from_normals(truth)

print(" P_er   mean err (deg)   median err (deg)")
for fraction in (0.0, 0.25, 0.5, 0.75, 1.0):
    keep = select_prior_pixels(shading.mask, fraction, seed=0)
    res = solve_field(shading, lighting, priors, SfsConfig(prior_mask=keep))
    m = res.normals.mask & truth.mask
    err = np.degrees(angular_error(res.normals.n[m], truth.n[m]))
    print(f"{fraction:5.2f}   {err.mean():14.3e}   {np.median(err):16.3e}")

# a weak, nearly grey light leaves the per-pixel problem ambiguous; the prior then matters
grey = lighting.L.mean(axis=0, keepdims=True).repeat(3, axis=0)
weak = build_m_matrices(grey)
shading = render_log_shading(weak, truth)
for fraction in (0.0, 1.0):
    keep = select_prior_pixels(shading.mask, fraction, seed=0)
    res = solve_field(shading, weak, priors, SfsConfig(prior_mask=keep))
    m = res.normals.mask & truth.mask
    err = np.degrees(angular_error(res.normals.n[m], truth.n[m]))
    print(f"grey light, P_er={fraction:.0f}: mean error {err.mean():.3g} deg")
