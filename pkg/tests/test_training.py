from dataclasses import replace

import numpy as np
import pytest

from equisfm import equinet, training
from equisfm.losses import reprojection_loss
from equisfm.synth import SceneConfig, generate_scene
from equisfm.trackstore import normalize_tracks
from equisfm.training import OptimizerState, TrainConfig, adam_step

SMALL = equinet.NetConfig(width=8)


def scene(seed, m=10, n=40):
    return normalize_tracks(generate_scene(SceneConfig(num_cameras=m, num_points=n, seed=seed)).tracks)


def test_defaults():
    c = TrainConfig()
    assert c.learning_rate == 1e-3 and c.subsample_range == (0.10, 0.20)
    assert c.finetune_epochs == 1000 and c.outlier_threshold == 0.6 and c.seed == 20
    assert training.LOW_OUTLIER_THRESHOLD == 0.8


def test_adam_zero_gradient_keeps_params():
    params = equinet.init_params(SMALL)
    before = params.copy()
    adam_step(params, {k: np.zeros_like(v) for k, v in params.tensors.items()}, OptimizerState(), 1e-3)
    assert params.equals(before)


def test_adam_is_scale_invariant():
    rng = np.random.default_rng(0)
    a, b = equinet.init_params(SMALL), equinet.init_params(SMALL)
    grads = {k: rng.normal(size=v.shape) for k, v in a.tensors.items()}
    sa, sb = OptimizerState(), OptimizerState()
    for _ in range(3):
        adam_step(a, grads, sa, 1e-3)
        adam_step(b, {k: 10.0 * g for k, g in grads.items()}, sb, 1e-3)
    assert all(np.allclose(a[k], b[k], rtol=0, atol=1e-15) for k in a)


def test_adam_first_step_closed_form():
    rng = np.random.default_rng(1)
    params = equinet.init_params(SMALL)
    before = params.copy()
    grads = {k: rng.normal(size=v.shape) for k, v in params.tensors.items()}
    lr, eps = 1e-3, 1e-8
    adam_step(params, grads, OptimizerState(eps=eps), lr)
    for k, g in grads.items():
        gh = g / np.linalg.norm(g)
        assert np.allclose(params[k] - before[k], -lr * gh / (np.abs(gh) + eps), rtol=1e-12, atol=1e-18)


def test_global_normalization_mode():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([0.0, 4.0])}
    out = training.normalize_gradients(g, "global")
    assert np.allclose(out["a"], [0.6, 0.0]) and np.allclose(out["b"], [0.0, 0.8])


def test_select_checkpoint():
    assert training.select_checkpoint([5, 3, 4, 6]) == 1  # second epoch
    assert training.select_checkpoint([2, 1, 1]) == 1
    assert training.select_checkpoint([]) == -1


def test_subsample_fraction():
    t = scene(0, m=30)
    rng = np.random.default_rng(0)
    for _ in range(20):
        sub = training.subsample_cameras(t, rng, TrainConfig())
        assert 3 <= sub.num_cameras <= 6
        assert sub.views_per_track().min() >= 3
        assert set(sub.camera_ids) <= set(range(30))


def test_train_returns_best_checkpoint():
    tr, val = [scene(1)], [scene(2)]
    seen = []
    res = training.train(
        tr, val, TrainConfig(max_epochs=6, patience=100), SMALL,
        on_epoch=lambda e, a, b: seen.append(b),
    )
    assert res.best_epoch == 1 + int(np.argmin(seen))
    best = float(training.scene_loss(val[0], res.params.as_tensors(), TrainConfig().loss))
    assert best == pytest.approx(min(seen))


def test_train_without_validation_returns_last():
    res = training.train([scene(3)], [], TrainConfig(max_epochs=3), SMALL)
    assert res.best_epoch == 3 and len(res.log) == 3


def test_train_stops_on_patience():
    res = training.train([scene(1)], [scene(2)], TrainConfig(max_epochs=200, patience=2), SMALL)
    assert len(res.log) < 200
    assert len(res.log) - res.best_epoch == 2


def test_train_is_deterministic():
    a = training.train([scene(4)], [scene(5)], TrainConfig(max_epochs=3), SMALL)
    b = training.train([scene(4)], [scene(5)], TrainConfig(max_epochs=3), SMALL)
    assert a.params.equals(b.params) and a.log == b.log


def test_train_rejects_unlabeled():
    t = scene(6)
    with pytest.raises(ValueError):
        training.train([replace(t, labels=None)], [], TrainConfig(max_epochs=1), SMALL)


def quiet_model(seed=0):
    params = equinet.init_params(SMALL, seed=seed)
    params.tensors["outlier_head.2.weight"][:] = 0.0
    params.tensors["outlier_head.2.bias"][:] = -5.0
    return params


def test_infer_keeps_everything_below_threshold():
    t = scene(7)
    inf = training.infer(t, quiet_model(), TrainConfig(finetune_epochs=0))
    assert inf.filtered.equals(t)
    assert sorted(inf.poses) == list(range(t.num_cameras))
    assert sorted(inf.points) == list(range(t.num_tracks))


def test_infer_without_finetune_returns_raw_predictions():
    t = scene(8)
    params = quiet_model(1)
    inf = training.infer(t, params, TrainConfig(finetune_epochs=0))
    _, cams, pts = training.predict(t, params)
    poses = training.poses_from_head(cams)
    for k, p in enumerate(poses):
        assert np.array_equal(inf.poses[k].q, p.q) and np.array_equal(inf.poses[k].t, p.t)
    assert np.array_equal(np.stack([inf.points[j] for j in range(t.num_tracks)]), pts)


def test_finetune_reduces_reprojection():
    t = normalize_tracks(generate_scene(SceneConfig(num_cameras=10, num_points=40, outlier_rate=0.0, seed=10)).tracks)
    params = equinet.init_params(equinet.NetConfig(width=16), seed=1)
    def loss(p):
        out = equinet.forward(t, p.as_tensors(), with_scores=False)
        return float(reprojection_loss(out.cameras, out.points, t))

    tuned = training.finetune(t, params, 300, 1e-3, TrainConfig())
    assert loss(tuned) < 0.5 * loss(params)


def test_training_loss_decreases_monotonically():
    """Over the first 50 epochs on one 20-camera scene, in >= 9 of 10 seeded runs."""
    monotone = 0
    for seed in range(10):
        t = normalize_tracks(generate_scene(SceneConfig(num_cameras=20, seed=seed)).tracks)
        res = training.train([t], [], TrainConfig(max_epochs=50, seed=seed))
        losses = np.array([row[1] for row in res.log])
        monotone += bool(np.all(np.diff(losses) < 0))
    assert monotone >= 9
