"""Calibrated camera model, triangulation, similarity alignment and pose metrics.

Quaternions are scalar-first ``(w, x, y, z)`` and Hamilton. A pose maps world
points into the camera frame, ``X_cam = R X + t``; the camera center is
``-R^T t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class GeometryError(ValueError):
    """Raised for degenerate geometric configurations."""


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------


def normalize_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise GeometryError("zero-length quaternion")
    return q / n


def canonical_quat(q) -> np.ndarray:
    """Unit quaternion with non-negative scalar part (q and -q are the same rotation)."""
    q = normalize_quat(q)
    return np.where(q[..., :1] < 0, -q, q)


def quat_to_rotmat(q) -> np.ndarray:
    w, x, y, z = np.moveaxis(normalize_quat(q), -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(R.shape[:-1] + (3, 3))


def rotmat_to_quat(R) -> np.ndarray:
    """Shepperd's method; returns the canonical (w >= 0) quaternion."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return canonical_quat(np.array(q))


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def rotvec_to_quat(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(x/2)/x -> 1/2 as x -> 0
    k = np.where(theta > 1e-12, np.sin(half) / np.where(theta > 1e-12, theta, 1.0), 0.5)
    return np.concatenate([np.cos(half), k * v], axis=-1)


def rotation_angle_deg(R) -> float:
    """Angle of a rotation matrix in degrees, accurate near 0 and 180."""
    R = np.asarray(R, dtype=np.float64)
    c = 0.5 * (np.trace(R) - 1.0)
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.degrees(np.arctan2(s, c)))


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraPose:
    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = canonical_quat(np.asarray(self.q, dtype=np.float64).reshape(4))
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def from_rt(cls, R, t) -> "CameraPose":
        return cls(rotmat_to_quat(R), t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def matrix(self) -> np.ndarray:
        """3x4 projection matrix [R | t]."""
        return np.hstack([self.R, self.t[:, None]])


@dataclass(frozen=True)
class SimilarityTransform:
    """x -> scale * R x + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise GeometryError(f"similarity scale must be positive, got {self.scale}")
        object.__setattr__(self, "rotation", canonical_quat(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.R.T + self.translation

    def inverse(self) -> "SimilarityTransform":
        Rt = self.R.T
        return SimilarityTransform(
            1.0 / self.scale, rotmat_to_quat(Rt), -(Rt @ self.translation) / self.scale
        )

    def apply_pose(self, pose: CameraPose) -> CameraPose:
        """Express a camera in the transformed world frame (same image projections)."""
        R = pose.R @ self.R.T
        c = self.apply(pose.center)
        return CameraPose.from_rt(R, -R @ c)


@dataclass
class PoseErrors:
    rotation_deg: np.ndarray
    translation: np.ndarray

    @property
    def rotation_mean(self) -> float:
        return float(np.mean(self.rotation_deg))

    @property
    def rotation_median(self) -> float:
        return float(np.median(self.rotation_deg))

    @property
    def translation_mean(self) -> float:
        return float(np.mean(self.translation))

    @property
    def translation_median(self) -> float:
        return float(np.median(self.translation))

    def summary(self) -> dict[str, float]:
        return {
            "rot_mean": self.rotation_mean,
            "rot_median": self.rotation_median,
            "trans_mean": self.translation_mean,
            "trans_median": self.translation_median,
        }


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def project(pose: CameraPose, point) -> tuple[np.ndarray, float]:
    """Normalized image coordinates of ``point`` and its depth in the camera."""
    Xc = pose.R @ np.asarray(point, dtype=np.float64) + pose.t
    depth = float(Xc[2])
    if depth == 0.0:
        raise GeometryError("point lies on the camera's principal plane")
    return Xc[:2] / depth, depth


def project_many(R: np.ndarray, t: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection: R (k,3,3), t (k,3), X (k,3) -> uv (k,2), depth (k,)."""
    Xc = np.einsum("kab,kb->ka", R, X) + t
    return Xc[:, :2] / Xc[:, 2:3], Xc[:, 2]


def triangulate(observations: Sequence[tuple[CameraPose, np.ndarray]]) -> np.ndarray:
    """Linear (DLT) triangulation from normalized observations."""
    if len(observations) < 2:
        raise GeometryError("triangulation needs at least 2 views")
    return triangulate_from_matrices(
        np.stack([p.matrix for p, _ in observations]),
        np.stack([np.asarray(x, dtype=np.float64) for _, x in observations]),
    )


def triangulate_from_matrices(P: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """DLT with P (k,3,4) camera matrices and uv (k,2) normalized observations."""
    if len(P) < 2:
        raise GeometryError("triangulation needs at least 2 views")
    A = np.concatenate(
        [uv[:, 0:1] * P[:, 2] - P[:, 0], uv[:, 1:2] * P[:, 2] - P[:, 1]], axis=0
    )
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, s, vt = np.linalg.svd(A)
    # a second (near-)null direction means the rays do not pin down a point
    if s[2] <= 1e-12 * s[0]:
        raise GeometryError("degenerate triangulation (coincident or collinear views)")
    X = vt[-1]
    if abs(X[3]) <= 1e-12 * np.linalg.norm(X[:3]):
        raise GeometryError("triangulated point is at infinity")
    return X[:3] / X[3]


def umeyama(src: np.ndarray, dst: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares s, R, t with ``s R src + t ~ dst`` for (k,3) point sets."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs**2).sum() / len(src)
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_s)
    return s, R, mu_d - s * R @ mu_s


def align_similarity(
    pred_poses: Sequence[CameraPose], gt_poses: Sequence[CameraPose]
) -> SimilarityTransform:
    """Similarity that maps predicted camera centers onto ground-truth centers."""
    if len(pred_poses) != len(gt_poses):
        raise GeometryError("pose lists differ in length")
    if len(pred_poses) < 3:
        raise GeometryError("similarity alignment needs at least 3 cameras")
    src = np.stack([p.center for p in pred_poses])
    dst = np.stack([p.center for p in gt_poses])
    for pts in (src, dst):
        sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1e-300):
            raise GeometryError("camera centers are collinear")
    s, R, t = umeyama(src, dst)
    return SimilarityTransform(s, rotmat_to_quat(R), t)


def pose_errors(
    pred: Sequence[CameraPose], gt: Sequence[CameraPose], align: SimilarityTransform
) -> PoseErrors:
    Rs = align.R
    rot, trans = [], []
    for p, g in zip(pred, gt):
        rot.append(rotation_angle_deg(p.R @ Rs.T @ g.R.T))
        trans.append(float(np.linalg.norm(align.apply(p.center) - g.center)))
    return PoseErrors(np.array(rot), np.array(trans))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_poses(path, poses: dict[int, CameraPose]) -> None:
    """One camera per line: ``cam_id qw qx qy qz tx ty tz``."""
    lines = []
    for cam_id in sorted(poses):
        p = poses[cam_id]
        lines.append(" ".join([str(cam_id)] + [_fmt(v) for v in (*p.q, *p.t)]))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_poses(path) -> dict[int, CameraPose]:
    poses = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        vals = [float(v) for v in parts[1:]]
        poses[int(parts[0])] = CameraPose(vals[:4], vals[4:])
    return poses


def write_points(path, points: dict[int, np.ndarray]) -> None:
    """One point per line: ``track_id x y z``."""
    lines = [" ".join([str(j)] + [_fmt(v) for v in points[j]]) for j in sorted(points)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_points(path) -> dict[int, np.ndarray]:
    points = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        points[int(parts[0])] = np.array([float(v) for v in parts[1:]])
    return points


def write_ply(path, points: np.ndarray, camera_centers: np.ndarray) -> None:
    """ASCII PLY with white scene points followed by red camera centers."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    centers = np.asarray(camera_centers, dtype=np.float64).reshape(-1, 3)
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points) + len(centers)}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    body = [f"{_fmt(x)} {_fmt(y)} {_fmt(z)} 255 255 255" for x, y, z in points]
    body += [f"{_fmt(x)} {_fmt(y)} {_fmt(z)} 255 0 0" for x, y, z in centers]
    Path(path).write_text("\n".join(header + body) + "\n")
