"""Multi-scene training with camera subsampling, and per-scene inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .equinet import ModelParams, NetConfig, forward, init_params
from .geometry import CameraPose
from .losses import LossConfig, reprojection_loss, total_loss
from .trackstore import MIN_TRACK_VIEWS, OUTLIER_THRESHOLD, TrackTensor, remove_outliers

log = logging.getLogger(__name__)

LOW_OUTLIER_THRESHOLD = 0.8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    subsample_range: tuple[float, float] = (0.10, 0.20)
    min_subsample_cameras: int = MIN_TRACK_VIEWS
    max_epochs: int = 10_000
    patience: int = 50
    validate_every: int = 1
    finetune_epochs: int = 1000
    finetune_learning_rate: float | None = None
    outlier_threshold: float = OUTLIER_THRESHOLD
    grad_norm: str = "per_tensor"  # or "global"
    seed: int = 20
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        lo, hi = self.subsample_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("subsample range must satisfy 0 < lo <= hi <= 1")
        if not 0.0 < self.outlier_threshold < 1.0:
            raise ValueError("outlier threshold must lie in (0, 1)")
        if self.grad_norm not in ("per_tensor", "global"):
            raise ValueError("grad_norm must be 'per_tensor' or 'global'")


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def normalize_gradients(grads: dict[str, np.ndarray], mode: str = "per_tensor") -> dict[str, np.ndarray]:
    if mode == "global":
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        return {k: g / norm if norm > 0 else g for k, g in grads.items()}
    out = {}
    for k, g in grads.items():
        norm = np.linalg.norm(g)
        out[k] = g / norm if norm > 0 else g
    return out


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    grad_norm: str = "per_tensor",
) -> None:
    """In-place ADAM update on unit-norm-rescaled gradients."""
    grads = normalize_gradients(grads, grad_norm)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(params[name])
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        params.tensors[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def _gradients(loss_fn: Callable[[dict], ad.Tensor], params: ModelParams) -> tuple[float, dict]:
    tensors = params.as_tensors(requires_grad=True)
    with ad.Tape() as tape:
        loss = loss_fn(tensors)
    tape.backward(loss)
    grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
    return float(loss), grads


def scene_loss(tracks: TrackTensor, tensors: dict, config: LossConfig) -> ad.Tensor:
    out = forward(tracks, tensors, with_scores=tracks.labels is not None)
    return total_loss(out.scores, tracks.labels, out.cameras, out.points, tracks, config).total


def subsample_cameras(tracks: TrackTensor, rng: np.random.Generator, config: TrainConfig) -> TrackTensor:
    """Random camera subset of 10-20 % (at least ``min_subsample_cameras``) with >= 3-view tracks."""
    lo, hi = config.subsample_range
    m = tracks.num_cameras
    for _ in range(100):
        frac = rng.uniform(lo, hi)
        k = min(m, max(config.min_subsample_cameras, int(round(frac * m))))
        cams = np.sort(rng.choice(m, size=k, replace=False))
        sub = tracks.restrict_cameras(cams).drop_empty_cameras()
        if sub.num_tracks > 0 and sub.num_cameras >= 2:
            return sub
    raise ValueError("could not draw a camera subset with any 3-view track")


def select_checkpoint(history: Sequence[float]) -> int:
    """Index of the minimal validation metric (first one on ties); -1 if empty."""
    if not len(history):
        return -1
    return int(np.argmin(history))


@dataclass
class TrainResult:
    params: ModelParams
    best_epoch: int
    log: list[tuple[int, float, float]]


def train(
    scenes: Sequence[TrackTensor],
    val_scenes: Sequence[TrackTensor] = (),
    config: TrainConfig = TrainConfig(),
    net: NetConfig | None = None,
    init: ModelParams | None = None,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Train on labeled, normalized scenes; returns the best validation checkpoint.

    Validation is the mean total loss on the full validation tensors. Without
    validation scenes the last checkpoint is returned.
    """
    if not scenes:
        raise ValueError("need at least one training scene")
    for s in list(scenes) + list(val_scenes):
        if not s.normalized or s.labels is None:
            raise ValueError("training scenes must be normalized and labeled")
    rng = np.random.default_rng(config.seed)
    params = init.copy() if init is not None else init_params(net, seed=config.seed)
    state = OptimizerState()
    history: list[float] = []
    checkpoints: list[ModelParams] = []
    epochs: list[int] = []
    records = []
    since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for scene in scenes:
            sub = subsample_cameras(scene, rng, config)
            value, grads = _gradients(lambda p: scene_loss(sub, p, config.loss), params)
            adam_step(params, grads, state, config.learning_rate, config.grad_norm)
            losses.append(value)
        train_loss = float(np.mean(losses))
        val = float("nan")
        if val_scenes and epoch % config.validate_every == 0:
            tensors = params.as_tensors()
            val = float(np.mean([float(scene_loss(s, tensors, config.loss)) for s in val_scenes]))
            improved = not history or val < min(history)
            history.append(val)
            checkpoints.append(params.copy())
            epochs.append(epoch)
            since_best = 0 if improved else since_best + config.validate_every
        records.append((epoch, train_loss, val))
        if on_epoch:
            on_epoch(epoch, train_loss, val)
        log.debug("epoch %d train %.6g val %.6g", epoch, train_loss, val)
        if val_scenes and since_best >= config.patience:
            break
        # keep only the best checkpoint around
        if checkpoints:
            best = select_checkpoint(history)
            checkpoints = [c if i == best else None for i, c in enumerate(checkpoints)]

    if not history:
        return TrainResult(params, records[-1][0], records)
    best = select_checkpoint(history)
    return TrainResult(checkpoints[best], epochs[best], records)


def predict(tracks: TrackTensor, params: ModelParams):
    """Network outputs as numpy arrays: scores (p,), cameras (m, 7), points (n, 3)."""
    out = forward(tracks, params.as_tensors(), with_scores=True)
    return out.scores.data, out.cameras.data, out.points.data


def finetune(tracks: TrackTensor, params: ModelParams, epochs: int, lr: float, config: TrainConfig) -> ModelParams:
    """Unsupervised per-scene optimization of all weights on reprojection loss."""
    params = params.copy()
    state = OptimizerState()

    def loss_fn(p):
        out = forward(tracks, p, with_scores=False)
        return reprojection_loss(out.cameras, out.points, tracks, config.loss)

    for epoch in range(epochs):
        value, grads = _gradients(loss_fn, params)
        adam_step(params, grads, state, lr, config.grad_norm)
        if epoch % 100 == 0:
            log.debug("finetune epoch %d reprojection %.6g", epoch, value)
    return params


def poses_from_head(cameras: np.ndarray) -> list[CameraPose]:
    return [CameraPose(row[3:7], row[0:3]) for row in np.asarray(cameras)]


@dataclass
class Inference:
    poses: dict[int, CameraPose]
    points: dict[int, np.ndarray]
    scores: np.ndarray
    filtered: TrackTensor
    params: ModelParams


def infer(tracks: TrackTensor, params: ModelParams, config: TrainConfig = TrainConfig()) -> Inference:
    """Classify, drop predicted outliers, fine-tune, and read poses/points off the heads.

    Cameras left without observations are dropped. Returned poses are keyed by
    the input's camera ids and points by its track ids.
    """
    scores, _, _ = predict(tracks, params)
    filtered = remove_outliers(tracks, scores, config.outlier_threshold).drop_empty_cameras()
    if filtered.num_tracks == 0 or filtered.num_cameras < 2:
        raise ValueError("no usable tracks remain after outlier removal")
    lr = config.finetune_learning_rate or config.learning_rate
    tuned = finetune(filtered, params, config.finetune_epochs, lr, config)
    _, cams, pts = predict(filtered, tuned)
    poses = dict(zip(filtered.camera_ids.tolist(), poses_from_head(cams)))
    points = dict(zip(filtered.track_ids.tolist(), pts))
    return Inference(poses, points, scores, filtered, tuned)
