import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from bimodal_stereo.core import DepthGrid, PointCloud, SimilarityPose, depth_to_pointcloud, rot_y, rot_z
from bimodal_stereo.registration import (
    DegenerateSampleError,
    MeshSurface,
    NotSimilarityError,
    RansacConfig,
    ReflectionError,
    RegistrationError,
    build_correspondences,
    closest_on_triangles,
    decompose_rotation,
    fit_rst_linear,
    icp_align,
    ransac_rst,
    register,
    rotation_error,
)
from bimodal_stereo.synth import SynthSpec, synthesize_pair

from oracles import smooth_surface


def cloud(n=200, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-5, 5, size=(n, 3)) * [1.0, 0.7, 0.4]


def pose_params_close(pose, s, angles, t, tol):
    assert abs(pose.s - s) <= tol
    np.testing.assert_allclose(pose.euler, angles, atol=tol)
    np.testing.assert_allclose(pose.t, t, atol=tol)


# icp_align

def test_icp_self_is_identity():
    P = cloud()
    pose = icp_align(P, P)
    assert abs(pose.s - 1) <= 1e-9
    np.testing.assert_allclose(pose.R, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(pose.t, 0, atol=1e-9)


def test_icp_recovers_small_rotation():
    P = cloud()
    pose = icp_align(P, P @ rot_y(10).T)
    assert pose.euler[1] == pytest.approx(10.0, abs=1e-6)
    assert abs(pose.s - 1) <= 1e-6


def test_icp_recovers_scale():
    P = cloud()
    pose = icp_align(P, 1.5 * P)
    assert pose.s == pytest.approx(1.5, abs=1e-6)


def test_icp_history_never_increases():
    P = cloud(seed=3)
    Q = SimilarityPose.from_euler(1.1, (5, -8, 12), (0.3, -0.2, 0.5)).transform(P)
    Q = Q + np.random.default_rng(1).normal(scale=0.05, size=Q.shape)
    for init in ("identity", "multi"):
        _, hist = icp_align(P, Q, init=init, full_output=True)
        assert np.all(np.diff(hist) <= 0)


def test_icp_rejects_degenerate():
    line = np.outer(np.arange(10.0), [1.0, 0.0, 0.0])
    with pytest.raises(DegenerateSampleError):
        icp_align(line, line)
    with pytest.raises(DegenerateSampleError):
        icp_align(np.zeros((3, 3)), cloud())


def test_icp_against_surface_removes_quantization():
    z = DepthGrid(smooth_surface(24, 2))
    target = MeshSurface(z)
    truth = SimilarityPose.from_euler(1.0, (0, 3, 0), (0.2, -0.1, 0.0))
    # source points sampled off the vertex lattice
    rng = np.random.default_rng(0)
    uv = rng.uniform(3, 20, size=(300, 2))
    from scipy.interpolate import RegularGridInterpolator

    f = RegularGridInterpolator((np.arange(24.0), np.arange(24.0)), z.z)
    on = np.column_stack([uv, f(uv[:, ::-1])])
    src = truth.inverse().transform(on)
    pose = icp_align(src, target, init=truth.compose(SimilarityPose.from_euler(1.0, (0, 0.5, 0))), max_iter=500)
    # bilinear samples are not exactly on the triangle mesh; stay near truth
    assert rotation_error(pose.R, truth.R) < 1e-2


# fit_rst_linear

def test_fit_identity():
    P = cloud(20)
    A, t = fit_rst_linear(P, P)
    np.testing.assert_allclose(A, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(t, 0, atol=1e-12)


def test_fit_exact_similarity():
    P = cloud(20)
    A0 = 2 * rot_z(30)
    A, t = fit_rst_linear(P, P @ A0.T + [1, 2, 3])
    np.testing.assert_allclose(A, A0, atol=1e-9)
    np.testing.assert_allclose(t, [1, 2, 3], atol=1e-9)


def test_fit_coplanar_is_degenerate():
    P = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
    with pytest.raises(DegenerateSampleError):
        fit_rst_linear(P, P)


@given(st.integers(0, 2 ** 31))
def test_fit_residual_zero_on_consistent_data(seed):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(12, 3))
    A0 = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    t0 = rng.normal(size=3)
    A, t = fit_rst_linear(P, P @ A0.T + t0)
    assert np.max(np.abs(P @ A.T + t - (P @ A0.T + t0))) <= 1e-9


# ransac_rst

def test_ransac_exact():
    P = cloud(100)
    truth = SimilarityPose.from_euler(1.3, (10, -20, 30), (1, 2, 3))
    pose, inl = ransac_rst(P, truth.transform(P), RansacConfig(seed=1))
    assert inl.sum() == 100
    pose_params_close(pose, 1.3, (10, -20, 30), (1, 2, 3), 1e-9)


def test_ransac_with_outliers():
    rng = np.random.default_rng(4)
    P = cloud(100, seed=4)
    truth = SimilarityPose.from_euler(0.8, (-15, 25, 5), (-2, 0.5, 4))
    Q = truth.transform(P)
    Q[80:] = rng.uniform(-10, 10, size=(20, 3))
    pose, inl = ransac_rst(P, Q, RansacConfig(seed=2))
    assert inl.sum() >= 80 and inl[:80].all()
    pose_params_close(pose, 0.8, (-15, 25, 5), (-2, 0.5, 4), 1e-6)


def test_ransac_no_consensus():
    rng = np.random.default_rng(5)
    with pytest.raises(RegistrationError):
        ransac_rst(rng.uniform(-50, 50, (60, 3)), rng.uniform(-50, 50, (60, 3)),
                   RansacConfig(seed=0, inlier_threshold=0.01))


def test_ransac_order_invariant():
    rng = np.random.default_rng(6)
    P = cloud(80, seed=6)
    Q = SimilarityPose.from_euler(1.1, (5, 5, 5), (1, 1, 1)).transform(P)
    Q[60:] += rng.uniform(5, 10, size=(20, 3))
    perm = rng.permutation(80)
    a, ia = ransac_rst(P, Q, RansacConfig(seed=3))
    b, ib = ransac_rst(P[perm], Q[perm], RansacConfig(seed=3))
    np.testing.assert_array_equal(ia[perm], ib)
    np.testing.assert_allclose(a.R, b.R, atol=1e-12)
    assert a.s == pytest.approx(b.s, abs=1e-12)


def test_ransac_config_validation():
    with pytest.raises(ValueError):
        RansacConfig(min_sample=3)


# decompose_rotation

def test_decompose_identity():
    np.testing.assert_allclose(decompose_rotation(np.eye(3)), (1, 0, 0, 0), atol=1e-12)


def test_decompose_pitch():
    np.testing.assert_allclose(decompose_rotation(rot_y(20)), (1, 0, 20, 0), atol=1e-6)


def test_decompose_scaled_composite():
    A = 2 * SimilarityPose.from_euler(1.0, (5, 10, 15)).R
    np.testing.assert_allclose(decompose_rotation(A), (2, 5, 10, 15), atol=1e-6)


@given(st.floats(-79.9, 79.9), st.floats(-79.9, 79.9), st.floats(-79.9, 79.9), st.floats(0.1, 10))
def test_decompose_compose_roundtrip(a, b, g, s):
    A = s * SimilarityPose.from_euler(1.0, (a, b, g)).R
    np.testing.assert_allclose(decompose_rotation(A), (s, a, b, g), atol=1e-6)


def test_decompose_rejects_reflection_and_shear():
    with pytest.raises(ReflectionError):
        decompose_rotation(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(NotSimilarityError):
        decompose_rotation(np.diag([1.0, 1.0, 2.0]))


# build_correspondences

def test_correspondences_exact():
    pc = depth_to_pointcloud(DepthGrid(smooth_surface(10, 1)))
    pose = SimilarityPose.from_euler(1.2, (3, 4, 5), (1, 0, 0))
    corr = build_correspondences(pose, pc, PointCloud(pose.transform(pc.points), pc.index, pc.grid_shape))
    assert len(corr) == len(pc)
    np.testing.assert_allclose(corr.distance, 0, atol=1e-12)
    np.testing.assert_array_equal(corr.source_pixel, corr.target_pixel)


def test_correspondences_disjoint():
    P = cloud(50)
    corr = build_correspondences(SimilarityPose.identity(), P, P + 100.0)
    assert len(corr) == 0


def test_correspondences_are_a_function_within_threshold():
    rng = np.random.default_rng(9)
    P, Q = rng.uniform(0, 5, (80, 3)), rng.uniform(0, 5, (60, 3))
    corr = build_correspondences(SimilarityPose.identity(), P, Q, 0.8)
    assert np.all(corr.distance < 0.8)
    assert np.unique(corr.source).size == len(corr)


def test_half_overlap_correspondences_lie_in_overlap(face, lighting):
    pair = synthesize_pair(SynthSpec(face, lighting, (0, 0, 0), 0.5, 1))
    src = depth_to_pointcloud(pair.depth)
    tgt = depth_to_pointcloud(face)
    corr = build_correspondences(pair.pose, src, tgt, 1.0)
    assert len(corr) == len(src)
    # zero rotation: every depth pixel maps to the same colour pixel
    np.testing.assert_array_equal(corr.source_pixel, corr.target_pixel)
    assert np.all(pair.depth.mask.ravel()[corr.target_pixel])


# rotation_error

def test_rotation_error_zero_and_direct_formula():
    assert rotation_error(rot_y(20), rot_y(20)) == 0.0
    expect = 2.0 * np.sqrt(1.0 - np.cos(np.radians(20.0))) / np.sqrt(3.0)
    assert rotation_error(np.eye(3), rot_y(20)) == pytest.approx(expect, rel=1e-12)
    assert rotation_error(np.eye(3), rot_y(20)) == pytest.approx(0.2835663, abs=1e-7)
    with pytest.raises(ValueError):
        rotation_error(np.zeros((3, 3)), np.eye(3))


def test_rotation_error_scale_normalized():
    R = Rotation.random(random_state=1).as_matrix()
    assert rotation_error(3 * R, R) == pytest.approx(0.0, abs=1e-15)


# MeshSurface

def test_closest_on_triangles_matches_dense_sampling():
    rng = np.random.default_rng(10)
    a, b, c = rng.normal(size=(3, 50, 3))
    p = rng.normal(scale=2, size=(50, 3))
    q = closest_on_triangles(p, a, b, c)
    u, v = np.meshgrid(np.linspace(0, 1, 201), np.linspace(0, 1, 201))
    keep = u + v <= 1
    u, v = u[keep], v[keep]
    for k in range(50):
        pts = a[k] + u[:, None] * (b[k] - a[k]) + v[:, None] * (c[k] - a[k])
        dense = np.min(np.linalg.norm(pts - p[k], axis=1))
        got = np.linalg.norm(q[k] - p[k])
        assert got <= dense + 1e-12
        assert got >= dense - 0.02


def test_mesh_surface_closest_matches_brute_force():
    z = DepthGrid(smooth_surface(12, 5))
    surf = MeshSurface(z)
    rng = np.random.default_rng(11)
    p = surf.points[rng.choice(len(surf.points), 100)] + rng.normal(scale=0.4, size=(100, 3))
    q, d, _ = surf.closest(p)
    T = surf.vertices[surf.triangles]
    for k in range(100):
        allq = closest_on_triangles(np.broadcast_to(p[k], (len(T), 3)), T[:, 0], T[:, 1], T[:, 2])
        assert d[k] == pytest.approx(np.min(np.linalg.norm(allq - p[k], axis=1)), abs=1e-12)
    np.testing.assert_allclose(np.linalg.norm(q - p, axis=1), d, atol=1e-12)


# register

@pytest.mark.parametrize("seed", range(3))
def test_register_random_similarity(seed):
    rng = np.random.default_rng(100 + seed)
    P = cloud(150, seed=seed)
    s = rng.uniform(0.5, 2.0)
    ang = rng.uniform(-60, 60, 3)
    t = rng.uniform(-5, 5, 3)
    truth = SimilarityPose.from_euler(s, ang, t)
    res = register(PointCloud(P), PointCloud(truth.transform(P)))
    pose_params_close(res.pose, s, ang, t, 1e-6)
    assert res.inliers == 150 and len(res.correspondences) == 150
