import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from equisfm import geometry as geo
from equisfm.synth import SceneConfig, generate_scene, scene_metrics
from equisfm.trackstore import format_tracks, normalize_tracks


def test_clean_scene_reprojects_exactly():
    scene = generate_scene(SceneConfig(num_cameras=8, num_points=40, outlier_rate=0.0, noise_sigma_px=0.0, seed=3))
    t = normalize_tracks(scene.tracks)
    R = np.stack([p.R for p in scene.gt_poses])
    tt = np.stack([p.t for p in scene.gt_poses])
    uv, depth = geo.project_many(R[t.cams], tt[t.cams], scene.gt_points[t.tracks])
    assert np.all(depth > 0)
    assert np.abs(uv - t.xy).max() < 1e-12
    assert not t.labels.any()


def test_exact_outlier_count():
    scene = generate_scene(SceneConfig(num_cameras=20, num_points=100, outlier_rate=0.2, seed=1))
    p = scene.tracks.num_observations
    assert scene.labels.sum() == int(np.floor(0.2 * p))


def test_outliers_lie_inside_image():
    scene = generate_scene(SceneConfig(seed=2))
    xy = scene.tracks.xy[scene.labels]
    assert np.all((xy >= 0) & (xy <= [640, 480]))


def test_same_seed_is_bit_identical():
    a, b = generate_scene(SceneConfig(seed=7)), generate_scene(SceneConfig(seed=7))
    assert format_tracks(a.tracks) == format_tracks(b.tracks)
    assert np.array_equal(a.gt_points, b.gt_points)
    assert format_tracks(a.tracks) != format_tracks(generate_scene(SceneConfig(seed=8)).tracks)


@settings(max_examples=15, deadline=None)
@given(st.integers(3, 30), st.integers(1, 60), st.floats(0.05, 1.0), st.integers(0, 10_000))
def test_every_track_has_three_views(m, n, vis, seed):
    scene = generate_scene(SceneConfig(num_cameras=m, num_points=n, visibility_rate=vis, seed=seed))
    assert scene.tracks.num_tracks == n
    assert scene.tracks.views_per_track().min() >= 3


@pytest.mark.parametrize("field,value", [("num_cameras", 2), ("outlier_rate", 1.5), ("visibility_rate", 0.0), ("focal_px", 0.0)])
def test_invalid_config(field, value):
    with pytest.raises(ValueError):
        SceneConfig(**{field: value})


def test_metrics_perfect():
    labels = np.array([True, False, False, True, False])
    m = scene_metrics(labels, labels.astype(float))
    assert m["recall_inliers"] == m["recall_outliers"] == m["precision_outliers"] == 1.0
    assert m["outliers_pct_predicted"] == 0.0
    assert m["outliers_pct_input"] == pytest.approx(40.0)


def test_metrics_nothing_removed():
    scene = generate_scene(SceneConfig(num_cameras=6, num_points=20, seed=0))
    m = scene_metrics(scene, np.full(scene.tracks.num_observations, 0.5))
    assert m["outliers_pct_predicted"] == pytest.approx(m["outliers_pct_input"])
    assert m["recall_outliers"] == 0.0 and m["recall_inliers"] == 1.0


def test_metrics_inverted():
    labels = np.array([True, False, False, True])
    m = scene_metrics(labels, (~labels).astype(float))
    assert m["recall_inliers"] == 0.0 and m["recall_outliers"] == 0.0
