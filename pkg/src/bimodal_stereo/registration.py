"""Similarity registration of the depth-camera cloud onto the shading cloud.

ICP gives an initial pose and nearest-neighbour correspondences, RANSAC
over the 12-parameter linear model rejects weak ones, and the winning
3x3 block is split into a scale and ``Rx(alpha) Ry(beta) Rz(gamma)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .core import SimilarityPose, euler_to_matrix, matrix_to_euler, rot_x, rot_y, rot_z
from .lm import levenberg_marquardt


class RegistrationError(RuntimeError):
    pass


class DegenerateSampleError(RegistrationError):
    pass


class ReflectionError(ValueError):
    pass


class NotSimilarityError(ValueError):
    pass


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 1000
    inlier_threshold: float = 1.0
    min_sample: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.min_sample < 4:
            raise ValueError("min_sample must be >= 4")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass(frozen=True)
class RegistrationConfig:
    icp_max_iter: int = 100
    icp_tol: float = 1e-10
    icp_init: str = "multi"
    fine_max_iter: int = 500
    correspondence_threshold: float = 1.0
    ransac: RansacConfig = field(default_factory=RansacConfig)


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Accepted pairs ``source[k] -> target[k]`` (positions in the two clouds).

    ``source_pixel`` / ``target_pixel`` hold the flat grid index each point
    came from, or -1 when the cloud carries no pixel indices.
    """

    source: np.ndarray
    target: np.ndarray
    distance: np.ndarray
    threshold: float
    source_pixel: np.ndarray = None
    target_pixel: np.ndarray = None

    def __post_init__(self):
        for name in ("source_pixel", "target_pixel"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, np.full(self.source.size, -1, dtype=np.int64))

    def __len__(self):
        return self.source.size

    @classmethod
    def empty(cls, threshold=1.0):
        e = np.zeros(0, dtype=np.int64)
        return cls(e, e, np.zeros(0), float(threshold), e, e)


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    pose: SimilarityPose
    icp_pose: SimilarityPose
    correspondences: CorrespondenceSet
    inliers: int


def _as_points(cloud):
    return np.asarray(getattr(cloud, "points", cloud), dtype=float)


def umeyama(src, dst, with_scale=True):
    """Closed-form least-squares similarity ``dst ~ s R src + t``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape[0] < 3:
        raise DegenerateSampleError("need at least 3 point pairs")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = np.mean(np.sum(xs * xs, axis=1))
    cov = xd.T @ xs / src.shape[0]
    U, S, Vt = np.linalg.svd(cov)
    if var_s <= 0 or S[1] <= 1e-12 * max(S[0], 1e-300):
        raise DegenerateSampleError("point configuration is rank deficient")
    D = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2] = -1.0
    R = U @ np.diag(D) @ Vt
    s = float(np.sum(S * D) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return SimilarityPose(s, R, t)


def _pca_candidates(src, dst):
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    ws, Vs = np.linalg.eigh(np.cov((src - mu_s).T))
    wd, Vd = np.linalg.eigh(np.cov((dst - mu_d).T))
    s = float(np.sqrt(wd.sum() / ws.sum()))
    out = []
    for signs in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
        R = Vd @ np.diag(signs) @ Vs.T
        if np.linalg.det(R) < 0:
            R = Vd @ np.diag(-np.asarray(signs)) @ Vs.T
        out.append(SimilarityPose(s, R, mu_d - s * R @ mu_s))
    return out


def _pose_params(pose):
    return np.concatenate([Rotation.from_matrix(pose.R).as_rotvec(), [np.log(pose.s)], pose.t])


def _params_pose(q):
    if not np.all(np.isfinite(q)) or abs(q[3]) > 50:
        return None
    return SimilarityPose(float(np.exp(q[3])), Rotation.from_rotvec(q[:3]).as_matrix(), q[4:])


def _aligned(a, b, max_angle_deg=10.0):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return na > 0 and nb > 0 and a @ b >= np.cos(np.radians(max_angle_deg)) * na * nb


def icp_align(source, target, max_iter=100, tol=1e-10, init="identity", trim=3.0, full_output=False,
              accelerate=True):
    """Point-to-point ICP with a similarity model.

    ``target`` is a point cloud or a :class:`MeshSurface`, in which case
    every source point is matched to its exact closest surface point.
    ``init`` is a pose or one of ``"identity"``, ``"centroid"`` (translate
    centroids together), ``"pca"`` (principal axes, best of the four
    proper sign choices) and ``"multi"`` (ICP from identity and from each
    principal-axes start; the run ending closest wins).  Pairs farther than
    ``trim`` times the median match distance are left out of each fit.
    When consecutive updates point the same way (within 10 degrees in
    parameter space) the step is extrapolated while the mean match
    distance keeps falling, which speeds up the slow sliding along weakly
    constrained directions.  The best pose seen is returned;
    ``full_output`` also returns its mean match distance after every sweep,
    which never increases.
    """
    src = _as_points(source)
    surface = target if isinstance(target, MeshSurface) else None
    dst = surface.points if surface is not None else _as_points(target)
    if src.shape[0] < 4 or dst.shape[0] < 4:
        raise DegenerateSampleError("ICP needs at least 4 points per cloud")
    for pts in (src, dst):
        if np.linalg.matrix_rank(pts - pts.mean(axis=0), tol=1e-9 * max(np.ptp(pts), 1.0)) < 2:
            raise DegenerateSampleError("point cloud is degenerate (collinear)")
    if surface is not None:
        def objective(pose):
            q, d, _ = surface.closest(pose.transform(src))
            return float(d.mean()) / pose.s, d, q
    else:
        tree = cKDTree(dst)

        def objective(pose):
            d, j = tree.query(pose.transform(src))
            return float(d.mean()) / pose.s, d, dst[j]

    if isinstance(init, SimilarityPose):
        pose = init
    elif init == "identity":
        pose = SimilarityPose.identity()
    elif init == "centroid":
        pose = SimilarityPose(1.0, np.eye(3), dst.mean(axis=0) - src.mean(axis=0))
    elif init == "pca":
        pose = min(_pca_candidates(src, dst), key=lambda p: objective(p)[0])
    elif init == "multi":
        # run from identity and every principal-axes start, keep the tightest fit
        runs = [icp_align(src, target, max_iter, tol, p, trim, True, accelerate)
                for p in [SimilarityPose.identity()] + _pca_candidates(src, dst)]
        pose, history = min(runs, key=lambda r: r[1][-1])
        return (pose, history) if full_output else pose
    else:
        raise ValueError(f"unknown ICP init {init!r}")

    cur, d, match = objective(pose)
    best, best_val = pose, cur
    history = [cur]
    last = None
    for _ in range(max_iter):
        keep = d <= trim * np.median(d) + 1e-12
        try:
            new = umeyama(src[keep], match[keep])
        except DegenerateSampleError:
            break
        val, d, match = objective(new)
        q0, q1 = _pose_params(pose), _pose_params(new)
        step = q1 - q0
        if accelerate and last is not None and _aligned(step, last):
            # successive updates agree: walk further along them while the fit improves
            f = 1.0
            while f < 1e4:
                cand = _params_pose(q1 + f * step)
                if cand is None:
                    break
                cv, cd, cm = objective(cand)
                if not cv < val:
                    break
                new, val, d, match = cand, cv, cd, cm
                f = 2.0 * f + 1.0
        last = _pose_params(new) - q0
        moved = np.max(np.abs(new.transform(src) - pose.transform(src)))
        pose = new
        if val < best_val:
            best, best_val = new, val
        # the reported objective is that of the best pose so far
        history.append(best_val)
        if moved <= tol * max(history[0], 1e-300):
            break
    return (best, history) if full_output else best


def fit_rst_linear(src, dst):
    """Least-squares ``(A, t)`` of ``dst ~ A src + t`` from the stacked 3n x 12 system."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    n = src.shape[0]
    if n < 4:
        raise DegenerateSampleError("need at least 4 correspondences")
    design = np.zeros((3 * n, 12))
    for r in range(3):
        design[r::3, 3 * r:3 * r + 3] = src
        design[r::3, 9 + r] = 1.0
    scale = max(np.ptp(src), 1.0)
    if np.linalg.matrix_rank(design, tol=1e-9 * scale * np.sqrt(n)) < 12:
        raise DegenerateSampleError("correspondences are coplanar; the 12-parameter system is rank deficient")
    theta, *_ = np.linalg.lstsq(design, dst.ravel(), rcond=None)
    return theta[:9].reshape(3, 3), theta[9:]


def _euler_residuals(target):
    def fun(x, idx):
        a, b, g = np.degrees(x[0])
        Rx, Ry, Rz = rot_x(a), rot_y(b), rot_z(g)
        G = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
        Gy = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
        Gz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        r = (Rx @ Ry @ Rz - target).ravel()
        J = np.column_stack([(G @ Rx @ Ry @ Rz).ravel(), (Rx @ Gy @ Ry @ Rz).ravel(),
                             (Rx @ Ry @ Gz @ Rz).ravel()])
        return r[None], J[None]
    return fun


def decompose_rotation(A, max_iter=100, isotropy_tol=0.01):
    """Split ``A ~ s Rx(alpha) Ry(beta) Rz(gamma)``; angles in degrees.

    ``s`` is the cube root of ``det(A)``; every singular value of ``A`` must
    lie within ``isotropy_tol`` (relative) of it.
    """
    A = np.asarray(A, dtype=float)
    det = np.linalg.det(A)
    if det <= 0:
        raise ReflectionError("matrix has non-positive determinant (reflection)")
    s = float(np.cbrt(det))
    sv = np.linalg.svd(A, compute_uv=False)
    if np.max(np.abs(sv / s - 1.0)) > isotropy_tol:
        raise NotSimilarityError(f"singular values {sv} are not isotropic")
    target = A / s
    x0 = np.radians(matrix_to_euler(_nearest_rotation(target)))
    res = levenberg_marquardt(_euler_residuals(target), x0[None], max_iter=max_iter,
                              gtol=1e-16, xtol=1e-16)
    a, b, g = np.degrees(res.x[0])
    a, b, g = (float((v + 180.0) % 360.0 - 180.0) for v in (a, b, g))
    return s, a, b, g


def _nearest_rotation(A):
    U, _, Vt = np.linalg.svd(A)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return R


def build_correspondences(pose, source, target, threshold=1.0):
    """Map ``source`` with ``pose``, match each point to its nearest target, keep pairs closer than ``threshold``."""
    src = _as_points(source)
    dst = _as_points(target)
    if src.shape[0] == 0 or dst.shape[0] == 0:
        return CorrespondenceSet.empty(threshold)
    d, j = cKDTree(dst).query(pose.transform(src))
    keep = d < threshold
    i, j = np.flatnonzero(keep), j[keep]
    si = getattr(source, "index", None)
    ti = getattr(target, "index", None)
    return CorrespondenceSet(i, j, d[keep], float(threshold),
                             None if si is None else si[i], None if ti is None else ti[j])


def _affine_batch(Y, X):
    """Per-sample least squares ``X ~ [Y 1] theta``; returns ``(k, 4, 3)`` and a usable mask."""
    Y1 = np.concatenate([Y, np.ones(Y.shape[:2] + (1,))], axis=2)
    G = np.einsum("kni,knj->kij", Y1, Y1)
    rhs = np.einsum("kni,knj->kij", Y1, X)
    cond = np.linalg.cond(G)
    ok = np.isfinite(cond) & (cond < 1e10)
    theta = np.zeros((Y.shape[0], 4, 3))
    if np.any(ok):
        theta[ok] = np.linalg.solve(G[ok], rhs[ok])
    return theta, ok


def _affine_residuals(theta, Y1, X):
    return np.linalg.norm(Y1 @ theta - X, axis=-1)


def ransac_rst(source_points, target_points, cfg=RansacConfig(), chunk=100):
    """RANSAC over paired rows ``target ~ A source + t``.

    Consensus is the inlier count, ties going to the smaller summed inlier
    residual and then to the earlier sample.  The winner is refit on its
    inliers until the inlier set stops changing.  Returns the pose and a
    boolean inlier mask.
    """
    Y = np.asarray(source_points, dtype=float)
    X = np.asarray(target_points, dtype=float)
    n = Y.shape[0]
    if n < cfg.min_sample:
        raise RegistrationError(f"need at least {cfg.min_sample} correspondences, got {n}")
    rng = np.random.default_rng(cfg.seed)
    Y1 = np.column_stack([Y, np.ones(n)])
    thr = cfg.inlier_threshold

    best = (-1, np.inf)
    best_theta = None
    done = 0
    while done < cfg.iterations:
        k = min(chunk, cfg.iterations - done)
        samples = np.stack([rng.choice(n, cfg.min_sample, replace=False) for _ in range(k)])
        theta, ok = _affine_batch(Y[samples], X[samples])
        res = np.linalg.norm(np.einsum("ni,kij->knj", Y1, theta) - X[None], axis=-1)
        inl = (res < thr) & ok[:, None]
        count = inl.sum(axis=1)
        total = np.where(inl, res, 0.0).sum(axis=1)
        for i in range(k):
            key = (int(count[i]), float(total[i]))
            if ok[i] and (key[0] > best[0] or (key[0] == best[0] and key[1] < best[1])):
                best, best_theta = key, theta[i]
        done += k

    if best_theta is None or best[0] < cfg.min_sample:
        raise RegistrationError("no sample reached a consensus of min_sample inliers")

    inliers = _affine_residuals(best_theta, Y1, X) < thr
    for _ in range(20):
        try:
            A, t = fit_rst_linear(Y[inliers], X[inliers])
        except DegenerateSampleError as exc:
            raise RegistrationError("inlier set is degenerate") from exc
        theta = np.vstack([A.T, t])
        new = _affine_residuals(theta, Y1, X) < thr
        if np.count_nonzero(new) < cfg.min_sample or np.array_equal(new, inliers):
            break
        inliers = new

    # then trim pairs far outside the robust residual scale of the refit
    floor = 1e-9 * (1.0 + np.max(np.abs(X)))
    for _ in range(20):
        res = _affine_residuals(theta, Y1, X)
        sigma = 1.4826 * np.median(res[inliers])
        tight = inliers & (res <= max(3.0 * sigma, floor))
        if np.count_nonzero(tight) < max(cfg.min_sample, 4) or np.array_equal(tight, inliers):
            break
        try:
            A, t = fit_rst_linear(Y[tight], X[tight])
        except DegenerateSampleError:
            break
        theta = np.vstack([A.T, t])
        inliers = tight

    try:
        s, a, b, g = decompose_rotation(A)
    except ValueError as exc:
        raise RegistrationError(f"fitted model is not a similarity: {exc}") from exc
    R = euler_to_matrix(a, b, g)
    t = np.mean(X[inliers] - s * Y[inliers] @ R.T, axis=0)
    return SimilarityPose(s, R, t), inliers


def _triangle_weights(d1, d2, aa, bb, ab):
    """Barycentric ``(v, w)`` of the closest point, from ``d1 = e1.(p-a)``, ``d2 = e2.(p-a)``.

    ``aa = e1.e1``, ``bb = e2.e2`` and ``ab = e1.e2`` for the edges
    ``e1 = b - a``, ``e2 = c - a``.  Voronoi regions are tested vertex,
    edge, interior, the first match winning.
    """
    d3, d4 = d1 - aa, d2 - ab
    d5, d6 = d1 - ab, d2 - bb
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        inv = 1.0 / (va + vb + vc)
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
    ]
    v = np.select(conds, [0.0, 1.0, t_ab, 0.0, 0.0, 1.0 - t_bc], vb * inv)
    w = np.select(conds, [0.0, 0.0, 0.0, 1.0, t_ac, t_bc], vc * inv)
    return v, w


def closest_on_triangles(p, a, b, c):
    """Closest point to ``p`` on triangle ``(a, b, c)``, elementwise over leading axes."""
    e1, e2 = b - a, c - a
    ap = p - a
    dot = lambda x, y: np.einsum("...i,...i->...", x, y)
    v, w = _triangle_weights(dot(e1, ap), dot(e2, ap), dot(e1, e1), dot(e2, e2), dot(e1, e2))
    return a + v[..., None] * e1 + w[..., None] * e2


class MeshSurface:
    """A depth grid as a continuous triangulated surface (each cell split along its anti-diagonal).

    :meth:`closest` returns exact closest points on the surface, so matching
    against it carries no sampling quantization.
    """

    def __init__(self, depth, candidates=3):
        h, w = depth.shape
        x, y = np.meshgrid(np.arange(w) * depth.pitch[0], np.arange(h) * depth.pitch[1])
        self.vertices = np.stack([x, y, np.nan_to_num(depth.z)], axis=-1).reshape(-1, 3)
        m = depth.mask
        idx = np.arange(h * w).reshape(h, w)
        a, b, c, d = idx[:-1, :-1], idx[:-1, 1:], idx[1:, :-1], idx[1:, 1:]
        t1 = np.stack([a, b, c], axis=-1)[m[:-1, :-1] & m[:-1, 1:] & m[1:, :-1]]
        t2 = np.stack([d, c, b], axis=-1)[m[1:, 1:] & m[1:, :-1] & m[:-1, 1:]]
        self.triangles = np.concatenate([t1, t2]).reshape(-1, 3)
        used = np.zeros(h * w, dtype=bool)
        used[self.triangles.ravel()] = True
        if not np.any(used):
            raise DegenerateSampleError("surface has no triangles")
        self.used = np.flatnonzero(used)
        # incident triangles per vertex, padded with -1
        tv = self.triangles.ravel()
        order = np.argsort(tv, kind="stable")
        counts = np.bincount(tv, minlength=h * w)
        start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        inc = np.full((h * w, 6), -1)
        rank = np.arange(tv.size) - start[tv[order]]
        inc[tv[order], rank] = order // 3
        self.incident = inc
        self.tree = cKDTree(self.vertices[self.used])
        self.k = int(min(candidates, self.used.size))
        self.points = self.vertices[self.used]
        V = self.vertices[self.triangles]
        self._a = V[:, 0]
        self._e1 = V[:, 1] - V[:, 0]
        self._e2 = V[:, 2] - V[:, 0]
        self._aa = np.einsum("ti,ti->t", self._e1, self._e1)
        self._bb = np.einsum("ti,ti->t", self._e2, self._e2)
        self._ab = np.einsum("ti,ti->t", self._e1, self._e2)

    def closest(self, p):
        """``(closest points, distances, nearest vertex pixel)`` for query points ``(n, 3)``.

        Candidates are the triangles around the few nearest vertices.
        """
        p = np.asarray(p, dtype=float)
        _, j = self.tree.query(p, k=self.k)
        j = self.used[np.asarray(j).reshape(p.shape[0], -1)]
        tri = self.incident[j].reshape(p.shape[0], -1)
        valid = tri >= 0
        t = np.where(valid, tri, 0)
        ap = p[:, None, :] - self._a[t]
        e1, e2 = self._e1[t], self._e2[t]
        d1 = np.einsum("kci,kci->kc", e1, ap)
        d2 = np.einsum("kci,kci->kc", e2, ap)
        v, w = _triangle_weights(d1, d2, self._aa[t], self._bb[t], self._ab[t])
        off = v[..., None] * e1 + w[..., None] * e2 - ap  # closest point minus p
        d = np.where(valid, np.sqrt(np.einsum("kci,kci->kc", off, off)), np.inf)
        best = np.argmin(d, axis=1)
        rows = np.arange(p.shape[0])
        return p + off[rows, best], d[rows, best], j[:, 0]


def register(source, target, cfg=RegistrationConfig(), init=None, fine_target=None):
    """ICP, then RANSAC on the ICP correspondences, then final correspondences.

    ``source`` is the depth-camera cloud, ``target`` the shading cloud; the
    returned pose maps source into target.  With ``fine_target`` (the
    target as a :class:`MeshSurface`) the ICP pose is polished against the
    continuous surface and RANSAC runs on closest-surface-point pairs,
    which removes the grid quantization of vertex matching.  The returned
    correspondences always index ``target``.
    """
    icp = icp_align(source, target, cfg.icp_max_iter, cfg.icp_tol,
                    cfg.icp_init if init is None else init)
    src = _as_points(source)
    if fine_target is not None:
        start = icp_align(src, fine_target, cfg.fine_max_iter, cfg.icp_tol, icp)
        q, d, _ = fine_target.closest(start.transform(src))
        keep = d < cfg.correspondence_threshold
        pose, inl = ransac_rst(src[keep], q[keep], cfg.ransac)
    else:
        corr = build_correspondences(icp, src, target, cfg.correspondence_threshold)
        pose, inl = ransac_rst(src[corr.source], _as_points(target)[corr.target], cfg.ransac)
    final = build_correspondences(pose, source, target, cfg.correspondence_threshold)
    return RegistrationResult(pose, icp, final, int(np.count_nonzero(inl)))


def rotation_error(R_est, R_gt):
    """``|| R_est / |R_est| - R_gt / |R_gt| ||`` with Frobenius norms."""
    R_est = np.asarray(R_est, dtype=float)
    R_gt = np.asarray(R_gt, dtype=float)
    a, b = np.linalg.norm(R_est), np.linalg.norm(R_gt)
    if a == 0 or b == 0:
        raise ValueError("rotation matrices must be nonzero")
    return float(np.linalg.norm(R_est / a - R_gt / b))
