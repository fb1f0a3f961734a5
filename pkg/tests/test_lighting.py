import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bimodal_stereo.core import NormalField
from bimodal_stereo.lighting import (
    C1,
    C2,
    C3,
    C4,
    C5,
    LightingPrior,
    build_m_matrices,
    lighting_prior_cost,
    load_lighting,
    render_log_shading,
    rotated_forms,
    save_lighting,
    shade,
)

from conftest import random_unit


def one_hot(k):
    L = np.zeros((3, 9))
    L[:, k - 1] = 1.0
    return L


def irradiance_polynomial(L, n):
    """Closed-form expansion of the second-order irradiance polynomial."""
    x, y, z = n
    L1, L2, L3, L4, L5, L6, L7, L8, L9 = L
    return (C4 * L1 - C5 * L7 + 2 * C2 * (L4 * x + L2 * y + L3 * z) + C3 * L7 * z * z
            + C1 * L9 * (x * x - y * y) + 2 * C1 * (L5 * x * y + L8 * x * z + L6 * y * z))


def test_published_constants():
    assert (C1, C2, C3, C4, C5) == (0.429043, 0.511664, 0.743125, 0.886227, 0.247708)


def test_zero_lighting_gives_zero_forms():
    assert np.all(build_m_matrices(np.zeros(27)).M == 0)


def test_dc_coefficient_lands_in_corner():
    M = build_m_matrices(one_hot(1)).M
    for j in range(3):
        expect = np.zeros((4, 4))
        expect[3, 3] = 0.886227
        np.testing.assert_array_equal(M[j], expect)


def test_fifth_coefficient_is_xy_term():
    M = build_m_matrices(one_hot(5)).M
    for j in range(3):
        expect = np.zeros((4, 4))
        expect[0, 1] = expect[1, 0] = 0.429043
        np.testing.assert_array_equal(M[j], expect)


def test_render_zero_lighting():
    n = NormalField(np.broadcast_to([0.0, 0.0, 1.0], (3, 3, 3)).copy())
    np.testing.assert_array_equal(render_log_shading(build_m_matrices(np.zeros(27)), n).values, 0.0)


@pytest.mark.parametrize("k, expect", [(1, 0.886227), (7, 0.495417)])
def test_render_frontal_normal(k, expect):
    n = NormalField(np.array([[[0.0, 0.0, 1.0]]]))
    np.testing.assert_allclose(render_log_shading(build_m_matrices(one_hot(k)), n).values[0, 0], expect,
                               atol=1e-12)


def test_render_matches_double_loop_and_polynomial():
    rng = np.random.default_rng(0)
    for _ in range(100):
        L = rng.normal(size=(3, 9))
        n = random_unit(rng, camera_facing=False)
        lit = build_m_matrices(L)
        got = shade(lit.M, n)
        nh = np.append(n, 1.0)
        for j in range(3):
            loop = sum(nh[a] * lit.M[j, a, b] * nh[b] for a in range(4) for b in range(4))
            assert got[j] == pytest.approx(loop, abs=1e-12)
            assert got[j] == pytest.approx(irradiance_polynomial(L[j], n), abs=1e-12)


@given(st.integers(0, 2 ** 31))
def test_render_is_linear_in_lighting(seed):
    rng = np.random.default_rng(seed)
    La, Lb = rng.normal(size=(2, 27))
    n = NormalField(random_unit(rng, 12).reshape(3, 4, 3))
    a = render_log_shading(build_m_matrices(La), n).values
    b = render_log_shading(build_m_matrices(Lb), n).values
    ab = render_log_shading(build_m_matrices(La + Lb), n).values
    np.testing.assert_allclose(ab, a + b, atol=1e-12)


@given(st.integers(0, 2 ** 31))
def test_rotated_forms_shade_rotated_normals(seed):
    from scipy.spatial.transform import Rotation

    rng = np.random.default_rng(seed)
    M = build_m_matrices(rng.normal(size=27)).M
    R = Rotation.random(random_state=seed).as_matrix()
    n = random_unit(rng, 20, camera_facing=False)
    np.testing.assert_allclose(shade(rotated_forms(M, R), n), shade(M, n @ R.T), atol=1e-12)


def test_prior_cost_examples():
    mu = np.arange(27.0)
    prior = LightingPrior(mu, np.eye(27), 1.0)
    assert lighting_prior_cost(prior, mu) == 0.0
    e1 = np.zeros(27)
    e1[0] = 1.0
    assert lighting_prior_cost(prior, mu + e1) == pytest.approx(1.0)
    off = LightingPrior(mu, np.eye(27), 0.0)
    assert lighting_prior_cost(off, np.random.default_rng(0).normal(size=27)) == 0.0


def test_prior_validation():
    with pytest.raises(ValueError):
        LightingPrior(np.zeros(27), -np.eye(27), 1.0)
    with pytest.raises(ValueError):
        LightingPrior(np.zeros(27), np.eye(27), -1.0)
    with pytest.raises(ValueError):
        build_m_matrices(np.zeros(26))


def test_lighting_file_roundtrip(tmp_path, lighting):
    path = tmp_path / "L.json"
    save_lighting(path, lighting)
    np.testing.assert_array_equal(load_lighting(path).L, lighting.L)
    txt = tmp_path / "L.txt"
    txt.write_text(" ".join(repr(float(v)) for v in lighting.vector))
    np.testing.assert_array_equal(load_lighting(txt).L, lighting.L)
    nested = tmp_path / "nested.json"
    nested.write_text(json.dumps(lighting.L.tolist()))
    np.testing.assert_array_equal(load_lighting(nested).L, lighting.L)
