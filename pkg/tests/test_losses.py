import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from equisfm import autodiff as ad
from equisfm import losses
from equisfm.autodiff import Tensor
from equisfm.geometry import quat_to_rotmat
from equisfm.losses import LossConfig
from equisfm.trackstore import TrackTensor

IDENTITY_CAMS = np.tile([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0], (3, 1))


def one_track(xy):
    return TrackTensor(3, 1, [0, 1, 2], [0, 0, 0], np.asarray(xy, dtype=float), normalized=True)


def test_defaults():
    c = LossConfig()
    assert (c.alpha, c.hinge_h) == (10.0, 1e-4)


def test_exact_reprojection_is_zero():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(4, 3)) + [0, 0, 6]
    cams = np.zeros((3, 7))
    rot = Rotation.from_rotvec(rng.normal(0, 0.2, (3, 3)))
    cams[:, 3:] = rot.as_quat(scalar_first=True) * [[2.0], [0.5], [1.0]]
    cams[:, :3] = rng.normal(0, 0.1, (3, 3))
    c, j = np.meshgrid(np.arange(3), np.arange(4), indexing="ij")
    c, j = c.ravel(), j.ravel()
    R = np.stack([quat_to_rotmat(q) for q in cams[:, 3:]])
    Xc = np.einsum("kab,kb->ka", R[c], X[j]) + cams[c, :3]
    t = TrackTensor(3, 4, c, j, Xc[:, :2] / Xc[:, 2:], normalized=True)
    assert float(losses.reprojection_loss(cams, X, t)) == pytest.approx(0.0, abs=1e-12)


def test_residual_three_four_five():
    t = one_track(np.tile([-3.0, -4.0], (3, 1)))
    loss = losses.reprojection_loss(IDENTITY_CAMS, np.array([[0.0, 0.0, 1.0]]), t)
    assert float(loss) == pytest.approx(5.0)


def test_depth_hinge():
    t = one_track(np.zeros((3, 2)))
    loss = losses.reprojection_loss(IDENTITY_CAMS, np.array([[0.0, 0.0, 5e-5]]), t)
    assert float(loss) == pytest.approx(5e-5, rel=1e-12)


def test_gradient_is_finite_at_zero_residual():
    t = one_track(np.zeros((3, 2)))
    X = Tensor(np.array([[0.0, 0.0, 2.0]]), requires_grad=True)
    with ad.Tape() as tape:
        loss = losses.reprojection_loss(IDENTITY_CAMS, X, t)
    tape.backward(loss)
    assert float(loss) == 0.0
    assert np.all(np.isfinite(X.grad))


def test_camera_frame_points_match_rotation_matrix():
    rng = np.random.default_rng(1)
    q = rng.normal(size=(3, 4))
    cams = np.hstack([rng.normal(size=(3, 3)), q])
    X = rng.normal(size=(2, 3))
    t = TrackTensor(3, 2, [0, 1, 2, 0, 1, 2], [0, 0, 0, 1, 1, 1], np.zeros((6, 2)), normalized=True)
    got = losses.camera_frame_points(Tensor(cams), Tensor(X), t).data
    R = np.stack([quat_to_rotmat(v) for v in q])
    expected = np.einsum("kab,kb->ka", R[t.cams], X[t.tracks]) + cams[t.cams, :3]
    assert np.allclose(got, expected, atol=1e-12)


def test_bce_all_half():
    assert float(losses.outlier_bce_loss(np.full(5, 0.5), [0, 1, 0, 1, 1])) == pytest.approx(math.log(2))


def test_bce_clamp_limit():
    assert float(losses.outlier_bce_loss(np.array([1.0, 0.0]), [1, 0])) == pytest.approx(0.0, abs=1e-11)
    assert math.isfinite(float(losses.outlier_bce_loss(np.array([0.0]), [1])))


def test_bce_confident_miss():
    assert float(losses.outlier_bce_loss(np.array([0.9]), [0])) == pytest.approx(-math.log(0.1))


def test_weighted_bce_reduces_to_plain():
    s, y = np.array([0.2, 0.7, 0.4]), np.array([0, 1, 1])
    plain = float(losses.outlier_bce_loss(s, y))
    weighted = float(losses.outlier_bce_loss(s, y, LossConfig(outlier_weight=1.0 + 1e-15)))
    assert weighted == pytest.approx(plain, rel=1e-12)


def test_total_combines_with_alpha():
    t = one_track(np.tile([-0.03, -0.04], (3, 1)))
    scores = np.full(3, math.exp(-0.2))
    parts = losses.total_loss(scores, np.ones(3), IDENTITY_CAMS, np.array([[0.0, 0.0, 1.0]]), t)
    v = parts.values()
    assert v["outlier_bce"] == pytest.approx(0.2)
    assert v["reprojection"] == pytest.approx(0.05)
    assert v["total"] == pytest.approx(0.7)


def test_total_zero():
    t = one_track(np.zeros((3, 2)))
    parts = losses.total_loss(np.zeros(3), np.zeros(3), IDENTITY_CAMS, np.array([[0.0, 0.0, 1.0]]), t)
    assert float(parts.total) == pytest.approx(0.0, abs=1e-11)


def test_total_without_labels_is_reprojection():
    t = one_track(np.tile([-3.0, -4.0], (3, 1)))
    parts = losses.total_loss(None, None, IDENTITY_CAMS, np.array([[0.0, 0.0, 1.0]]), t)
    assert float(parts.total) == pytest.approx(50.0)


def test_unnormalized_tracks_rejected():
    t = TrackTensor(3, 1, [0, 1, 2], [0, 0, 0], np.zeros((3, 2)))
    with pytest.raises(ValueError):
        losses.reprojection_loss(IDENTITY_CAMS, np.zeros((1, 3)), t)


def test_reprojection_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    t = TrackTensor(3, 2, [0, 1, 2, 0, 1, 2], [0, 0, 0, 1, 1, 1], rng.normal(0, 0.1, (6, 2)), normalized=True)
    cams = Tensor(np.hstack([rng.normal(0, 0.1, (3, 3)), rng.normal(size=(3, 4))]))
    X = Tensor(rng.normal(0, 0.3, (2, 3)) + [0, 0, 4])
    assert ad.grad_check(lambda c, x: losses.reprojection_loss(c, x, t), [cams, X]) < 1e-6
