"""Training objective: outlier BCE plus depth-hinged reprojection error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .trackstore import TrackTensor

ALPHA = 10.0
HINGE_H = 1e-4
BCE_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    alpha: float = ALPHA
    hinge_h: float = HINGE_H
    # weight on the outlier class in BCE; 1.0 is the plain unweighted loss
    outlier_weight: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.hinge_h > 0 and self.outlier_weight > 0):
            raise ValueError("alpha, hinge_h and outlier_weight must be positive")


@dataclass
class LossBreakdown:
    total: Tensor
    outlier_bce: Tensor
    reprojection: Tensor

    def values(self) -> dict[str, float]:
        return {
            "total": float(self.total),
            "outlier_bce": float(self.outlier_bce),
            "reprojection": float(self.reprojection),
        }


def _cross(a: Tensor, b: Tensor) -> Tensor:
    ax, ay, az = a[:, 0], a[:, 1], a[:, 2]
    bx, by, bz = b[:, 0], b[:, 1], b[:, 2]
    return ad.stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=1)


def camera_frame_points(cameras: Tensor, points: Tensor, tracks: TrackTensor) -> Tensor:
    """R_i X_j + t_i for every observation, from raw (m, 7) head output."""
    t = cameras[:, 0:3]
    q = cameras[:, 3:7]
    q = q / ad.sqrt(ad.sum(ad.square(q), axis=1, keepdims=True))
    q = q[tracks.cams]
    X = points[tracks.tracks]
    w, u = q[:, 0:1], q[:, 1:4]
    # v' = v + 2w (u x v) + 2 u x (u x v)
    uv = _cross(u, X)
    rotated = X + 2.0 * (w * uv + _cross(u, uv))
    return rotated + t[tracks.cams]


def reprojection_terms(cameras: Tensor, points: Tensor, tracks: TrackTensor, hinge_h: float = HINGE_H) -> Tensor:
    """Per-observation s_ij: residual norm when depth >= h, else the depth hinge."""
    Xc = camera_frame_points(cameras, points, tracks)
    depth = Xc[:, 2]
    front = depth.data >= hinge_h
    # keep the unused branch finite so its zero gradient stays zero
    safe_depth = ad.where(front, depth, 1.0)
    proj = Xc[:, 0:2] / ad.reshape(safe_depth, (-1, 1))
    residual = ad.sqrt(ad.sum(ad.square(proj - tracks.xy), axis=1))
    hinge = ad.relu(hinge_h - depth)
    return ad.where(front, residual, hinge)


def reprojection_loss(cameras, points, tracks: TrackTensor, config: LossConfig = LossConfig()) -> Tensor:
    if tracks.num_observations == 0:
        raise ValueError("reprojection loss needs at least one observation")
    if not tracks.normalized:
        raise ValueError("reprojection loss expects normalized tracks")
    return ad.mean(reprojection_terms(ad.as_tensor(cameras), ad.as_tensor(points), tracks, config.hinge_h))


def outlier_bce_loss(scores, labels, config: LossConfig = LossConfig()) -> Tensor:
    labels = np.asarray(labels, dtype=np.float64)
    scores = ad.as_tensor(scores)
    if config.outlier_weight == 1.0:
        return ad.bce(scores, labels, BCE_EPS)
    # weighted variant: split the mean so each class keeps its own weight
    w = np.where(labels > 0, config.outlier_weight, 1.0)
    p = ad.where(scores.data > BCE_EPS, scores, BCE_EPS)
    p = ad.where(p.data < 1 - BCE_EPS, p, 1 - BCE_EPS)
    ll = labels * ad.log(p) + (1.0 - labels) * ad.log(1.0 - p)
    return -ad.mean(ll * w)


def total_loss(scores, labels, cameras, points, tracks: TrackTensor, config: LossConfig = LossConfig()) -> LossBreakdown:
    """``bce + alpha * reprojection``; without labels it is reprojection only."""
    reproj = reprojection_loss(cameras, points, tracks, config)
    if scores is None or labels is None:
        bce = Tensor(0.0)
    else:
        bce = outlier_bce_loss(scores, labels, config)
    return LossBreakdown(bce + config.alpha * reproj, bce, reproj)
