"""Rigid transforms, pinhole projection and pose-accuracy metrics.

Units are millimetres for 3D quantities and pixels for image quantities.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np


class BehindCameraError(ValueError):
    """A point with non-positive depth cannot be projected."""


@dataclass(frozen=True)
class Pose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls, t=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(np.eye(3), np.asarray(t, dtype=np.float64))

    def is_valid(self, tol: float = 1e-6) -> bool:
        return bool(np.abs(self.R.T @ self.R - np.eye(3)).max() < tol and np.linalg.det(self.R) > 0)

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: apply ``other`` first, then ``self``."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.array(d["R"], dtype=np.float64), np.array(d["t"], dtype=np.float64))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


DEFAULT_INTRINSICS = CameraIntrinsics(140.0, 140.0, 64.0, 64.0)


def max_pairwise_distance(points: np.ndarray) -> float:
    pts = np.asarray(points, dtype=np.float64)
    best = 0.0
    for i in range(0, len(pts), 256):
        block = pts[i:i + 256]
        d2 = ((block[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


@dataclass
class ObjectModel:
    """3D model points plus the 9 canonical keypoints (8 box vertices, centroid)."""

    points: np.ndarray
    keypoints3d: np.ndarray
    diameter: float
    symmetric: bool = False
    class_id: int = 0
    dims: tuple[float, float, float] | None = None
    face_colors: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.keypoints3d = np.asarray(self.keypoints3d, dtype=np.float64).reshape(9, 3)
        if len(self.points) < 4:
            raise ValueError("an object model needs at least 4 points")
        if self.face_colors is not None:
            self.face_colors = np.asarray(self.face_colors, dtype=np.float64).reshape(6, 3)

    @property
    def m(self) -> int:
        return len(self.points)

    @classmethod
    def cuboid(cls, dims, class_id: int = 0, symmetric: bool = False, grid: int = 5,
               face_colors=None) -> "ObjectModel":
        """Axis-aligned box centred at the origin with a surface point grid."""
        dims = tuple(float(d) for d in dims)
        half = np.asarray(dims) / 2.0
        verts = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                         dtype=np.float64) * half
        keypoints = np.vstack([verts, verts.mean(axis=0)])
        u = np.linspace(-1.0, 1.0, grid)
        pts = []
        for axis in range(3):
            a, b = [ax for ax in range(3) if ax != axis]
            for sign in (-1.0, 1.0):
                for p in u:
                    for q in u:
                        v = np.zeros(3)
                        v[axis] = sign
                        v[a] = p
                        v[b] = q
                        pts.append(v * half)
        pts = np.unique(np.round(np.array(pts), 12), axis=0)
        return cls(pts, keypoints, max_pairwise_distance(pts), symmetric, class_id, dims, face_colors)

    def to_dict(self) -> dict:
        d = {
            "points": self.points.tolist(),
            "keypoints3d": self.keypoints3d.tolist(),
            "diameter": self.diameter,
            "symmetric": self.symmetric,
            "class_id": self.class_id,
        }
        if self.dims is not None:
            d["dims"] = list(self.dims)
        if self.face_colors is not None:
            d["face_colors"] = self.face_colors.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectModel":
        return cls(np.array(d["points"]), np.array(d["keypoints3d"]), float(d["diameter"]),
                   bool(d.get("symmetric", False)), int(d.get("class_id", 0)),
                   tuple(d["dims"]) if d.get("dims") is not None else None,
                   np.array(d["face_colors"]) if d.get("face_colors") is not None else None)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ObjectModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def rotation_about(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle_rad) * kx + (1 - np.cos(angle_rad)) * kx @ kx


def rodrigues(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    if theta < 1e-12:
        kx = np.array([[0, -omega[2], omega[1]], [omega[2], 0, -omega[0]], [-omega[1], omega[0], 0]])
        return np.eye(3) + kx
    return rotation_about(omega / theta, theta)


def rot_z(angle_deg: float) -> np.ndarray:
    return rotation_about((0.0, 0.0, 1.0), np.deg2rad(angle_deg))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform (Haar) rotation via a normalised random quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def transform_points(pose: Pose, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return pts @ pose.R.T + pose.t


def project(intrinsics: CameraIntrinsics, point_cam) -> np.ndarray:
    """Pinhole projection of camera-frame point(s) to pixels.

    Accepts a single 3-vector or an ``(n, 3)`` array.
    """
    p = np.asarray(point_cam, dtype=np.float64)
    single = p.ndim == 1
    p = p.reshape(-1, 3)
    if np.any(p[:, 2] <= 0):
        raise BehindCameraError("point at or behind the camera plane (z <= 0)")
    uv = np.column_stack([intrinsics.fx * p[:, 0] / p[:, 2] + intrinsics.cx,
                          intrinsics.fy * p[:, 1] / p[:, 2] + intrinsics.cy])
    return uv[0] if single else uv


def project_model(intrinsics: CameraIntrinsics, pose: Pose, points) -> np.ndarray:
    return project(intrinsics, transform_points(pose, points))


def add_metric(model: ObjectModel, gt: Pose, est: Pose) -> float:
    """Mean distance between model points under the two poses (mm)."""
    a = transform_points(gt, model.points)
    b = transform_points(est, model.points)
    return float(np.linalg.norm(a - b, axis=1).mean())


def adds_metric(model: ObjectModel, gt: Pose, est: Pose) -> float:
    """Mean closest-point distance, exact O(m^2) search (mm)."""
    a = transform_points(gt, model.points)
    b = transform_points(est, model.points)
    nearest = np.empty(len(a))
    for i in range(0, len(a), 512):
        block = a[i:i + 512]
        d2 = ((block[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
        nearest[i:i + 512] = np.sqrt(d2.min(axis=1))
    return float(nearest.mean())


def projection_metric(model: ObjectModel, intrinsics: CameraIntrinsics, gt: Pose, est: Pose) -> float:
    """Mean pixel distance between the two projections of the model points."""
    a = project_model(intrinsics, gt, model.points)
    b = project_model(intrinsics, est, model.points)
    return float(np.linalg.norm(a - b, axis=1).mean())


class Metric(str, Enum):
    ADD_10D = "ADD_10D"
    PROJ_5PX = "PROJ_5PX"


ADD_FRACTION = 0.1
PROJ_PIXELS = 5.0


def pose_correct(model: ObjectModel, intrinsics: CameraIntrinsics, gt: Pose, est: Pose,
                 metric: Metric | str) -> bool:
    """Strict-threshold correctness: ADD(-S) < 0.1 d, or projection error < 5 px.

    ADD-S replaces ADD exactly when ``model.symmetric`` is set. The
    projection metric is the plain (non-symmetric) variant for all objects.
    """
    metric = Metric(metric)
    if metric is Metric.ADD_10D:
        err = adds_metric(model, gt, est) if model.symmetric else add_metric(model, gt, est)
        return err < ADD_FRACTION * model.diameter
    try:
        return projection_metric(model, intrinsics, gt, est) < PROJ_PIXELS
    except BehindCameraError:
        return False


def rotation_geodesic(Ra, Rb) -> float:
    """Angle of ``Ra^T Rb`` in degrees, clamped to [0, 180]."""
    m = np.asarray(Ra, dtype=np.float64).T @ np.asarray(Rb, dtype=np.float64)
    c = (np.trace(m) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    # atan2 stays accurate near 0 and 180 degrees where arccos does not
    return float(np.clip(np.degrees(np.arctan2(s, np.clip(c, -1.0, 1.0))), 0.0, 180.0))
