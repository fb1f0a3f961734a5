import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bimodal_stereo.core import LogShadingImage, NormalField, angular_error, depth_to_normals
from bimodal_stereo.lighting import build_m_matrices, render_log_shading, shade
from bimodal_stereo.sfs import (
    ConvergenceWarning,
    PriorField,
    SfsConfig,
    hemisphere_directions,
    sfs_residuals,
    solve_field,
    solve_normals,
    solve_pixel,
)
from bimodal_stereo.synth import select_prior_pixels

from conftest import random_unit
from oracles import grid_search, irradiance, pixel_objective


def test_residuals_vanish_at_truth(lighting):
    n = np.array([0.3, -0.2, 0.9])
    n /= np.linalg.norm(n)
    r = sfs_residuals(n, shade(lighting.M, n), lighting, prior=n)
    assert r.shape == (7,)
    np.testing.assert_allclose(r, 0.0, atol=1e-15)


def test_zero_prior_weight_silences_prior(lighting):
    n = np.array([0.0, 0.0, 1.0])
    r = sfs_residuals(n, np.zeros(3), lighting, prior=np.array([1.0, 0.0, 0.0]),
                      cfg=SfsConfig(prior_weight=0.0))
    assert np.all(r[3:6] == 0.0)


def test_norm_residual_of_double_length(lighting):
    r = sfs_residuals([0.0, 0.0, 2.0], np.zeros(3), lighting, cfg=SfsConfig(norm_weight=1.0))
    assert r[6] == pytest.approx(3.0)


def test_residuals_match_independent_objective(lighting):
    rng = np.random.default_rng(3)
    for _ in range(20):
        n, p = rng.normal(size=(2, 3))
        S = rng.normal(size=3)
        r = sfs_residuals(n, S, lighting, prior=p)
        assert r @ r == pytest.approx(pixel_objective(n, S, lighting.L, p), rel=1e-12)


def test_brightness_term_matches_irradiance_oracle(lighting):
    n = random_unit(np.random.default_rng(5), 30)
    np.testing.assert_allclose(shade(lighting.M, n), irradiance(lighting.L, n), atol=1e-12)


def test_roundtrip_with_prior(lighting):
    rng = np.random.default_rng(7)
    for n0 in random_unit(rng, 20):
        n = solve_pixel(shade(lighting.M, n0), lighting, prior=n0)
        assert angular_error(n, n0) < 1e-4


def test_zero_residual_start_is_fixed_point(lighting):
    n0 = np.array([0.2, 0.1, 0.97])
    n0 /= np.linalg.norm(n0)
    n, obj, conv = solve_pixel(shade(lighting.M, n0), lighting, init=n0, full_output=True)
    assert angular_error(n, n0) < 1e-12
    assert obj <= 1e-12


@given(st.integers(0, 2 ** 31))
@settings(max_examples=25)
def test_zero_residual_consistency(seed):
    rng = np.random.default_rng(seed)
    lit = build_m_matrices(rng.normal(size=27))
    n0 = random_unit(rng)
    _, obj, _ = solve_pixel(shade(lit.M, n0), lit, init=n0, full_output=True)
    assert obj <= 1e-12


def test_grid_oracle_random_init(lighting):
    rng = np.random.default_rng(11)
    for _ in range(10):
        n0 = random_unit(rng)
        S = shade(lighting.M, n0)
        n, obj, _ = solve_pixel(S, lighting, init=random_unit(rng), full_output=True)
        best, _ = grid_search(S, lighting.L)
        assert pixel_objective(n, S, lighting.L) <= best + 1e-8
        assert obj == pytest.approx(pixel_objective(n, S, lighting.L), abs=1e-12)


@given(st.integers(0, 2 ** 31))
@settings(max_examples=20)
def test_objective_never_exceeds_init(seed):
    rng = np.random.default_rng(seed)
    lit = build_m_matrices(rng.normal(size=27))
    S = rng.normal(size=3)
    prior = random_unit(rng)
    init = random_unit(rng)
    n, obj, _ = solve_pixel(S, lit, prior=prior, init=init, full_output=True)
    start = init / np.linalg.norm(init)
    assert obj <= pixel_objective(start, S, lit.L, prior) + 1e-12
    assert abs(np.linalg.norm(n) - 1.0) <= 1e-9 and n[2] >= 0


def test_prior_saturation(lighting):
    rng = np.random.default_rng(13)
    cfg = SfsConfig(prior_weight=1e6)
    for _ in range(10):
        n0, p = random_unit(rng, 2)
        n = solve_pixel(shade(lighting.M, n0), lighting, prior=p, cfg=cfg)
        assert np.degrees(angular_error(n, p)) < 0.1


def test_flat_scene(lighting):
    n = NormalField(np.broadcast_to([0.0, 0.0, 1.0], (8, 8, 3)).copy())
    res = solve_field(render_log_shading(lighting, n), lighting)
    assert np.max(angular_error(res.normals.n[res.normals.mask], [0, 0, 1])) < 1e-4


def test_field_respects_mask_and_invariants(lighting, face):
    gt = depth_to_normals(face)
    sh = render_log_shading(lighting, gt)
    mask = sh.mask.copy()
    mask[3:6, 3:6] = False
    res = solve_field(LogShadingImage(sh.values, mask), lighting)
    assert np.array_equal(res.normals.mask, mask)
    v = res.normals.n[mask]
    assert np.all(np.abs(np.linalg.norm(v, axis=1) - 1) <= 1e-9) and np.all(v[:, 2] >= 0)


def test_prior_percentage_subset_is_used(lighting, face):
    gt = depth_to_normals(face)
    sh = render_log_shading(lighting, gt)
    keep = select_prior_pixels(sh.mask, 0.0, 0)
    a = solve_field(sh, lighting, PriorField.from_normals(gt), SfsConfig(prior_mask=keep))
    b = solve_field(sh, lighting)
    np.testing.assert_array_equal(a.normals.n, b.normals.n)


def test_field_is_deterministic_per_pixel(lighting):
    rng = np.random.default_rng(17)
    S = rng.normal(0.5, 0.3, size=(40, 3))
    full, _, _ = solve_normals(S, lighting)
    part, _, _ = solve_normals(S[::-1][:15], lighting)
    np.testing.assert_array_equal(part, full[::-1][:15])


def test_iteration_cap_warns(lighting):
    with pytest.warns(ConvergenceWarning):
        solve_pixel(np.array([5.0, -3.0, 2.0]), lighting, init=[0.0, 0.0, 1.0],
                    cfg=SfsConfig(max_iterations=1, global_search=False))


def test_fibonacci_seeds_cover_hemisphere():
    d = hemisphere_directions(4.0)
    assert np.all(d[:, 2] >= 0)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
    probe = random_unit(np.random.default_rng(0), 500)
    assert np.degrees(np.arccos(np.clip(probe @ d.T, -1, 1)).min(axis=1)).max() < 4.0
