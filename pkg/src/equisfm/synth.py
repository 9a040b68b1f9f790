"""Seeded synthetic scenes: a ring of cameras around a box of points.

Randomness comes from numpy's PCG64 generator seeded with ``SceneConfig.seed``,
so scenes are reproducible across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraPose, project_many
from .trackstore import MIN_TRACK_VIEWS, TrackTensor


@dataclass(frozen=True)
class SceneConfig:
    num_cameras: int = 20
    num_points: int = 200
    noise_sigma_px: float = 1.0
    outlier_rate: float = 0.2
    visibility_rate: float = 0.5
    focal_px: float = 500.0
    image_size: tuple[int, int] = (640, 480)
    ring_radius: float = 3.0
    seed: int = 20

    def __post_init__(self):
        if self.num_cameras < MIN_TRACK_VIEWS:
            raise ValueError(f"need at least {MIN_TRACK_VIEWS} cameras")
        if self.num_points < 1:
            raise ValueError("need at least one point")
        for name in ("outlier_rate", "visibility_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.visibility_rate == 0.0:
            raise ValueError("visibility_rate 0 admits no track")
        if self.noise_sigma_px < 0 or self.focal_px <= 0 or self.ring_radius <= 0:
            raise ValueError("noise must be >= 0, focal length and radius > 0")


@dataclass
class SyntheticScene:
    gt_poses: list[CameraPose]
    gt_points: np.ndarray
    tracks: TrackTensor
    clean_xy: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return self.tracks.labels


def look_at(center: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> CameraPose:
    z = target - center
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return CameraPose.from_rt(R, -R @ center)


def generate_scene(config: SceneConfig = SceneConfig()) -> SyntheticScene:
    rng = np.random.default_rng(config.seed)
    m, n = config.num_cameras, config.num_points
    w, h = config.image_size
    K = np.array([[config.focal_px, 0.0, w / 2.0], [0.0, config.focal_px, h / 2.0], [0.0, 0.0, 1.0]])

    angles = 2.0 * np.pi * (np.arange(m) + rng.uniform(-0.25, 0.25, m)) / m
    radius = config.ring_radius * rng.uniform(0.9, 1.1, m)
    heights = rng.uniform(-0.3, 0.3, m) * config.ring_radius
    centers = np.stack([radius * np.cos(angles), heights, radius * np.sin(angles)], axis=1)
    targets = rng.uniform(-0.1, 0.1, (m, 3))
    poses = [look_at(c, tgt) for c, tgt in zip(centers, targets)]
    points = rng.uniform(-0.5, 0.5, (n, 3))

    visible = rng.random((m, n)) < config.visibility_rate
    for j in np.flatnonzero(visible.sum(axis=0) < MIN_TRACK_VIEWS):
        hidden = np.flatnonzero(~visible[:, j])
        extra = MIN_TRACK_VIEWS - visible[:, j].sum()
        visible[rng.choice(hidden, size=extra, replace=False), j] = True

    # track-major order matches TrackTensor's canonical sort
    tracks, cams = np.nonzero(visible.T)
    R = np.stack([p.R for p in poses])
    t = np.stack([p.t for p in poses])
    uv, depth = project_many(R[cams], t[cams], points[tracks])
    if np.any(depth <= 0):
        raise ValueError("scene geometry puts points behind a camera")
    clean = uv * config.focal_px + K[:2, 2]
    xy = clean + rng.normal(0.0, config.noise_sigma_px, clean.shape) if config.noise_sigma_px else clean.copy()

    p = len(cams)
    labels = np.zeros(p, dtype=bool)
    k = int(np.floor(config.outlier_rate * p))
    if k:
        picked = rng.permutation(p)[:k]
        labels[picked] = True
        xy[picked] = rng.uniform((0.0, 0.0), (w, h), (k, 2))
    tensor = TrackTensor(
        m, n, cams, tracks, xy, normalized=False, intrinsics=np.broadcast_to(K, (m, 3, 3)), labels=labels,
        keypoints=tracks,  # one keypoint per point and image, so the point id serves
    )
    return SyntheticScene(poses, points, tensor, clean)


def scene_metrics(labels, scores, threshold: float = 0.6) -> dict[str, float]:
    """Inlier/outlier classification metrics for scores against true labels (True = outlier).

    ``labels`` may also be a scene or track tensor carrying a ``labels`` array.
    ``outliers_pct_predicted`` is the outlier share among observations kept.
    """
    y = np.asarray(getattr(labels, "labels", labels), dtype=bool)
    pred = np.asarray(scores, dtype=np.float64) >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    tn = int(np.sum(~pred & ~y))

    def ratio(a, b):
        return a / b if b else 0.0

    precision = ratio(tp, tp + fp)
    recall = ratio(tp, tp + fn)
    return {
        "recall_inliers": ratio(tn, tn + fp),
        "recall_outliers": recall,
        "precision_outliers": precision,
        "fscore_outliers": ratio(2 * precision * recall, precision + recall),
        "outliers_pct_input": 100.0 * ratio(tp + fn, len(y)),
        "outliers_pct_predicted": 100.0 * ratio(fn, fn + tn),
    }
