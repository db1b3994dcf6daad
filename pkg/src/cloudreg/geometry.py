"""Point clouds, rigid transforms, exact neighbor search and pose error metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class ParameterError(ValueError):
    """Raised when an argument is outside the range an operation accepts."""


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ParameterError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            if nrm.shape[0] != pts.shape[0]:
                raise ParameterError(
                    f"{nrm.shape[0]} normals given for {pts.shape[0]} points")
            if np.any(np.abs(np.linalg.norm(nrm, axis=1) - 1.0) > 1e-6):
                raise ParameterError("normals must have unit length")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ParameterError("rotation must be a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous form."""
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class CorrespondenceSet:
    pairs: np.ndarray
    scores: Optional[np.ndarray] = None

    def __post_init__(self):
        pairs = np.array(self.pairs, dtype=np.int64).reshape(-1, 2)
        if len(np.unique(pairs[:, 0])) != len(pairs) or len(np.unique(pairs[:, 1])) != len(pairs):
            raise ParameterError("correspondences must be one-to-one")
        if np.any(pairs < 0):
            raise ParameterError("negative correspondence index")
        object.__setattr__(self, "pairs", pairs)
        if self.scores is not None:
            scores = np.array(self.scores, dtype=np.float64).reshape(-1)
            if scores.shape[0] != pairs.shape[0]:
                raise ParameterError("one score per correspondence required")
            object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return self.pairs.shape[0]

    def check_bounds(self, n_source: int, n_target: int) -> None:
        if len(self) and (self.pairs[:, 0].max() >= n_source or self.pairs[:, 1].max() >= n_target):
            raise ParameterError("correspondence index out of range")


def apply_transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    normals = None if cloud.normals is None else cloud.normals @ T.rotation.T
    return PointCloud(T.apply(cloud.points), normals)


def invert(T: RigidTransform) -> RigidTransform:
    Rt = T.rotation.T
    return RigidTransform(Rt, -Rt @ T.translation)


def compose(T1: RigidTransform, T2: RigidTransform) -> RigidTransform:
    """Transform that applies ``T2`` first, then ``T1``."""
    return RigidTransform(T1.rotation @ T2.rotation,
                          T1.rotation @ T2.translation + T1.translation)


# --------------------------------------------------------------------------- #
# neighbor search

def _points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared distances from explicit differences (exact ties stay ties)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def knn(cloud, query_index: int, k: int) -> list[int]:
    pts = _points(cloud)
    n = pts.shape[0]
    if not 1 <= k < n:
        raise ParameterError(f"k={k} must satisfy 1 <= k < {n}")
    d2 = ((pts - pts[query_index]) ** 2).sum(-1)
    d2[query_index] = np.inf
    order = np.argsort(d2, kind="stable")
    return order[:k].tolist()


def knn_all(points: np.ndarray, k: int) -> np.ndarray:
    """(N, k) neighbor table, self excluded, ties broken by lower index."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= k < n:
        raise ParameterError(f"k={k} must satisfy 1 <= k < {n}")
    d2 = squared_distances(pts, pts)
    np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def radius_neighbors(cloud, query_index: int, r: float, k_max: int) -> list[int]:
    if r <= 0 or k_max < 1:
        raise ParameterError("radius must be positive and k_max >= 1")
    pts = _points(cloud)
    d2 = ((pts - pts[query_index]) ** 2).sum(-1)
    inside = np.flatnonzero(d2 <= r * r)
    order = inside[np.argsort(d2[inside], kind="stable")]
    return order[:k_max].tolist()


# --------------------------------------------------------------------------- #
# pose errors

GIMBAL_EPS_DEG = 1e-6


def rot_x(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rot_z(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def euler_to_matrix(angles_deg: Sequence[float]) -> np.ndarray:
    """R = Rz(c) @ Ry(b) @ Rx(a) for angles (a, b, c) about x, y, z."""
    a, b, c = angles_deg
    return rot_z(c) @ rot_y(b) @ rot_x(a)


def matrix_to_euler(R: np.ndarray, branch: int = 0) -> tuple[np.ndarray, bool]:
    """Inverse of :func:`euler_to_matrix`.

    Returns ``((ax, ay, az) in degrees, gimbal_flag)``. ``branch=0`` gives the
    solution with |ay| <= 90; ``branch=1`` the equivalent (ax+180, 180-ay, az+180).
    Inside the gimbal-lock band the x angle is pinned to 0 and the flag is set.
    """
    R = np.asarray(R, dtype=np.float64)
    sy = float(np.clip(-R[2, 0], -1.0, 1.0))
    ay = np.degrees(np.arcsin(sy))
    if 90.0 - abs(ay) < GIMBAL_EPS_DEG:
        ax = 0.0
        # with ax pinned to 0: R[0,1] = -sin(az), R[1,1] = cos(az) for either sign of ay
        az = np.degrees(np.arctan2(-R[0, 1], R[1, 1]))
        return np.array([ax, 90.0 * np.sign(sy), az]), True
    ax = np.degrees(np.arctan2(R[2, 1], R[2, 2]))
    az = np.degrees(np.arctan2(R[1, 0], R[0, 0]))
    angles = np.array([ax, ay, az])
    if branch == 1:
        angles = np.array([ax + 180.0, 180.0 - ay, az + 180.0])
    return _wrap(angles), False


def _wrap(deg: np.ndarray) -> np.ndarray:
    return (np.asarray(deg) + 180.0) % 360.0 - 180.0


def rotation_error(R_est: np.ndarray, R_gt: np.ndarray, branch: int = 0) -> np.ndarray:
    """Per-axis absolute Euler-angle difference in degrees."""
    e_est, _ = matrix_to_euler(R_est, branch)
    e_gt, _ = matrix_to_euler(R_gt, branch)
    return np.abs(_wrap(e_est - e_gt))


def rotation_angle_error(R_est: np.ndarray, R_gt: np.ndarray) -> float:
    """Geodesic angle of R_est^T R_gt in degrees."""
    # atan2 form stays accurate for tiny angles where arccos loses half the digits
    M = np.asarray(R_est, dtype=np.float64).T @ np.asarray(R_gt, dtype=np.float64)
    c = (np.trace(M) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    return float(np.degrees(np.arctan2(s, c)))


def translation_error(t_est: np.ndarray, t_gt: np.ndarray) -> np.ndarray:
    return np.abs(np.asarray(t_est, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64))


def rmse(errors) -> float:
    e = np.asarray(errors, dtype=np.float64)
    return float(np.sqrt(np.mean(e ** 2))) if e.size else float("nan")


def mae(errors) -> float:
    e = np.asarray(errors, dtype=np.float64)
    return float(np.mean(np.abs(e))) if e.size else float("nan")
