"""Pose from 2D-3D correspondences: weighted DLT, rotation projection, then LM.

EPnP would also work here; with at most nine well-spread keypoints a DLT
start refined by Levenberg-Marquardt reaches the same accuracy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BehindCameraError, CameraIntrinsics, Pose, rodrigues

MIN_CORRESPONDENCES = 6
LM_INITIAL_DAMPING = 1e-3
LM_DAMPING_FACTOR = 10.0
LM_MAX_ITERATIONS = 50
LM_REL_TOL = 1e-10
LM_MAX_ESCALATIONS = 10


class InsufficientDataError(ValueError):
    pass


class DegenerateConfigurationError(ValueError):
    pass


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, best_pose: Pose):
        super().__init__(message)
        self.best_pose = best_pose


@dataclass(frozen=True)
class Correspondence:
    point3d: np.ndarray
    point2d: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "point3d", np.asarray(self.point3d, dtype=np.float64).reshape(3))
        object.__setattr__(self, "point2d", np.asarray(self.point2d, dtype=np.float64).reshape(2))
        w = float(self.weight)
        if not np.isfinite(w) or w < 0:
            raise ValueError("correspondence weight must be finite and nonnegative")
        object.__setattr__(self, "weight", w)


def _unpack(correspondences):
    X = np.array([c.point3d for c in correspondences], dtype=np.float64).reshape(-1, 3)
    x = np.array([c.point2d for c in correspondences], dtype=np.float64).reshape(-1, 2)
    w = np.array([c.weight for c in correspondences], dtype=np.float64)
    return X, x, w


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Orthogonal Procrustes projection onto SO(3)."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def dlt(X: np.ndarray, x: np.ndarray, w: np.ndarray, intrinsics: CameraIntrinsics) -> Pose:
    """Weighted linear estimate on normalized image coordinates."""
    xn = np.column_stack([(x[:, 0] - intrinsics.cx) / intrinsics.fx,
                          (x[:, 1] - intrinsics.cy) / intrinsics.fy])
    # condition the 3D side: zero mean, unit RMS radius
    mean = np.average(X, axis=0, weights=w)
    scale = np.sqrt(np.average(((X - mean) ** 2).sum(axis=1), weights=w))
    Xc = (X - mean) / scale
    n = len(X)
    Xh = np.column_stack([Xc, np.ones(n)])
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xn[:, :1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xn[:, 1:] * Xh
    sw = np.sqrt(w).repeat(2)
    _, _, Vt = np.linalg.svd(A * sw[:, None])
    P = Vt[-1].reshape(3, 4)
    M, p = P[:, :3], P[:, 3]
    # sign so that the weighted points sit in front of the camera
    depth = Xh @ P[2]
    if np.sum(w * depth) < 0:
        M, p = -M, -p
    R = nearest_rotation(M)
    s = np.linalg.svd(M, compute_uv=False).mean()
    t_c = p / s
    # undo 3D conditioning: x_cam = R (X - mean)/scale * ... -> rescale translation
    t = t_c * scale - R @ mean
    return Pose(R, t)


def _residuals(pose: Pose, X, x, sw, intrinsics: CameraIntrinsics) -> np.ndarray:
    pc = X @ pose.R.T + pose.t
    z = pc[:, 2]
    if np.any(z <= 0):
        return None
    u = intrinsics.fx * pc[:, 0] / z + intrinsics.cx
    v = intrinsics.fy * pc[:, 1] / z + intrinsics.cy
    return (np.column_stack([u - x[:, 0], v - x[:, 1]]) * sw[:, None]).ravel()


def _jacobian(pose: Pose, X, sw, intrinsics: CameraIntrinsics) -> np.ndarray:
    """d residual / d (omega, t) with the left-multiplied update exp(omega) R."""
    rx = X @ pose.R.T
    pc = rx + pose.t
    n = len(X)
    J = np.zeros((2 * n, 6))
    for i in range(n):
        x_, y_, z_ = pc[i]
        dproj = np.array([[intrinsics.fx / z_, 0.0, -intrinsics.fx * x_ / z_ ** 2],
                          [0.0, intrinsics.fy / z_, -intrinsics.fy * y_ / z_ ** 2]])
        a = rx[i]
        skew = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
        J[2 * i:2 * i + 2, :3] = dproj @ (-skew) * sw[i]
        J[2 * i:2 * i + 2, 3:] = dproj * sw[i]
    return J


def refine_lm(pose: Pose, X, x, w, intrinsics: CameraIntrinsics) -> Pose:
    """Levenberg-Marquardt on the weighted squared reprojection error."""
    sw = np.sqrt(w)
    r = _residuals(pose, X, x, sw, intrinsics)
    if r is None:
        raise NonConvergenceError("initial pose puts points behind the camera", pose)
    cost = float(r @ r)
    lam = LM_INITIAL_DAMPING
    escalations = 0
    for _ in range(LM_MAX_ITERATIONS):
        if cost < 1e-24:
            break
        J = _jacobian(pose, X, sw, intrinsics)
        JtJ = J.T @ J
        g = J.T @ r
        improved = False
        while not improved:
            A = JtJ + lam * np.diag(np.diag(JtJ) + 1e-12)
            try:
                delta = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                delta = -np.linalg.lstsq(A, g, rcond=None)[0]
            cand = Pose(rodrigues(delta[:3]) @ pose.R, delta[3:] + pose.t)
            r_new = _residuals(cand, X, x, sw, intrinsics)
            new_cost = float(r_new @ r_new) if r_new is not None else np.inf
            if new_cost < cost:
                improved = True
                rel = (cost - new_cost) / max(cost, 1e-300)
                pose, r, cost = cand, r_new, new_cost
                lam = max(lam / LM_DAMPING_FACTOR, 1e-12)
                escalations = 0
                if rel < LM_REL_TOL:
                    return Pose(nearest_rotation(pose.R), pose.t)
            else:
                if np.isfinite(new_cost) and (new_cost - cost) <= LM_REL_TOL * max(cost, 1e-300):
                    # at a minimum to working precision
                    return Pose(nearest_rotation(pose.R), pose.t)
                lam *= LM_DAMPING_FACTOR
                escalations += 1
                if escalations >= LM_MAX_ESCALATIONS:
                    raise NonConvergenceError(
                        f"LM cost failed to decrease after {escalations} damping escalations", pose)
    return Pose(nearest_rotation(pose.R), pose.t)


def _check_inputs(correspondences):
    usable = [c for c in correspondences if c.weight > 0]
    if len(usable) < MIN_CORRESPONDENCES:
        raise InsufficientDataError(
            f"need at least {MIN_CORRESPONDENCES} weighted correspondences, got {len(usable)}")
    X, x, w = _unpack(usable)
    sv = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateConfigurationError("3D points are collinear")
    if sv[2] <= 1e-9 * sv[0]:
        raise DegenerateConfigurationError("3D points are coplanar; the 12-parameter DLT needs depth spread")
    return X, x, w


def solve_pnp(correspondences, intrinsics: CameraIntrinsics, return_initial: bool = False):
    """Recover the object-to-camera pose.

    Zero-weight correspondences are ignored. With ``return_initial`` the
    DLT starting pose is returned alongside the refined one.
    """
    X, x, w = _check_inputs(correspondences)
    init = dlt(X, x, w, intrinsics)
    if np.any((X @ init.R.T + init.t)[:, 2] <= 0):
        raise NonConvergenceError("DLT initialisation places points behind the camera", init)
    pose = refine_lm(init, X, x, w, intrinsics)
    if pose.t[2] <= 0:
        raise NonConvergenceError("solution lies behind the camera", pose)
    return (pose, init) if return_initial else pose


def reprojection_rmse(pose: Pose, correspondences, intrinsics: CameraIntrinsics) -> float:
    """Weighted RMS pixel residual; zero-weight correspondences drop out."""
    X, x, w = _unpack(correspondences)
    pc = X @ pose.R.T + pose.t
    if np.any(pc[:, 2] <= 0):
        raise BehindCameraError("a correspondence lies behind the camera under this pose")
    u = intrinsics.fx * pc[:, 0] / pc[:, 2] + intrinsics.cx
    v = intrinsics.fy * pc[:, 1] / pc[:, 2] + intrinsics.cy
    sq = (u - x[:, 0]) ** 2 + (v - x[:, 1]) ** 2
    if w.sum() <= 0:
        raise InsufficientDataError("all correspondence weights are zero")
    return float(np.sqrt(np.sum(w * sq) / w.sum()))
