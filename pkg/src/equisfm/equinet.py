"""Permutation-equivariant encoder over track tensors and its three heads.

Features live on the observed cells only, as a ``(p, d)`` array aligned with
``TrackTensor.cams`` / ``TrackTensor.tracks``; unobserved cells are implicitly
zero. Pooling is always a mean over observed cells.

Weights are stored input-major, ``(d_in, d_out)``, so a layer is ``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .trackstore import TrackTensor

ENCODER_LAYERS = 3
HEAD_LAYERS = 3
WIDTH = 256
HEAD_OUTPUTS = {"outlier_head": 1, "camera_head": 7, "point_head": 3}


@dataclass(frozen=True)
class NetConfig:
    width: int = WIDTH
    encoder_layers: int = ENCODER_LAYERS
    head_layers: int = HEAD_LAYERS
    input_channels: int = 2


class ModelParams:
    """Named float64 parameter arrays in a fixed canonical order."""

    def __init__(self, tensors: dict[str, np.ndarray], config: NetConfig | None = None):
        self.config = config or NetConfig()
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
        expected = param_shapes(self.config)
        if list(self.tensors) != list(expected):
            raise ValueError("parameter names do not match the network layout")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.tensors[name])):
                raise ValueError(f"{name}: non-finite values")

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.config)

    def as_tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.tensors.items()}

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def equals(self, other: "ModelParams") -> bool:
        return list(self) == list(other) and all(
            np.array_equal(self[k], other[k]) for k in self
        )

    def save(self, path) -> None:
        Path(path).write_text(format_checkpoint(self))

    @classmethod
    def load(cls, path) -> "ModelParams":
        return parse_checkpoint(Path(path).read_text())


def param_shapes(config: NetConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    d_in, d = config.input_channels, config.width
    for k in range(config.encoder_layers):
        for w in ("W1", "W2", "W3", "W4"):
            shapes[f"encoder.{k}.{w}"] = (d_in, d)
        shapes[f"encoder.{k}.bias"] = (d,)
        d_in = d
    for head, out in HEAD_OUTPUTS.items():
        widths = [d] * config.head_layers + [out]
        for k in range(config.head_layers):
            shapes[f"{head}.{k}.weight"] = (widths[k], widths[k + 1])
            shapes[f"{head}.{k}.bias"] = (widths[k + 1],)
    return shapes


def init_params(config: NetConfig | None = None, seed: int = 20) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    config = config or NetConfig()
    rng = np.random.default_rng(seed)
    shapes = param_shapes(config)
    tensors = {}
    for name, shape in shapes.items():
        if name.endswith("bias"):
            fan_in = shapes[name.rsplit(".", 1)[0] + (".W1" if name.startswith("encoder") else ".weight")][0]
        else:
            fan_in = shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(tensors, config)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def equivariant_layer(
    x: Tensor, cams: np.ndarray, tracks: np.ndarray, m: int, n: int, W1, W2, W3, W4, bias
) -> Tensor:
    """Identity term plus track-, camera- and globally-pooled terms.

    Pooling is done before the matmul (equal by linearity, and much cheaper).
    """
    track_pool = ad.segment_mean(x, tracks, n) @ W2
    cam_pool = ad.segment_mean(x, cams, m) @ W3
    global_pool = ad.mean(x, axis=0, keepdims=True) @ W4
    return x @ W1 + track_pool[tracks] + cam_pool[cams] + global_pool + bias


def encode(tracks: TrackTensor, params: dict[str, Tensor], layers: int | None = None) -> Tensor:
    """(p, 2) normalized positions -> (p, d) latent features."""
    if layers is None:
        layers = sum(1 for k in params if k.startswith("encoder.") and k.endswith(".bias"))
    x = Tensor(tracks.xy)
    m, n = tracks.num_cameras, tracks.num_tracks
    for k in range(layers):
        p = [params[f"encoder.{k}.{w}"] for w in ("W1", "W2", "W3", "W4", "bias")]
        x = equivariant_layer(x, tracks.cams, tracks.tracks, m, n, *p)
        x = ad.relu(ad.mean_subtract_normalize(x))
    return x


def _mlp(x: Tensor, params: dict[str, Tensor], head: str) -> Tensor:
    k = 0
    while f"{head}.{k}.weight" in params:
        if k:
            x = ad.relu(x)
        x = x @ params[f"{head}.{k}.weight"] + params[f"{head}.{k}.bias"]
        k += 1
    return x


def outlier_head(latent: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Per-cell outlier probability, shape (p,)."""
    return ad.sigmoid(_mlp(latent, params, "outlier_head"))[:, 0]


def camera_head(latent: Tensor, tracks: TrackTensor, params: dict[str, Tensor]) -> Tensor:
    """(m, 7): translation then (unnormalized) quaternion for each camera."""
    if np.any(tracks.views_per_camera() == 0):
        raise ValueError("camera head needs at least one observation per camera")
    pooled = ad.segment_mean(latent, tracks.cams, tracks.num_cameras)
    return _mlp(pooled, params, "camera_head")


def point_head(latent: Tensor, tracks: TrackTensor, params: dict[str, Tensor]) -> Tensor:
    """(n, 3) scene point per track."""
    if np.any(tracks.views_per_track() == 0):
        raise ValueError("point head needs at least one observation per track")
    pooled = ad.segment_mean(latent, tracks.tracks, tracks.num_tracks)
    return _mlp(pooled, params, "point_head")


@dataclass
class NetOutput:
    scores: Tensor | None
    cameras: Tensor
    points: Tensor


def forward(tracks: TrackTensor, params: dict[str, Tensor], with_scores: bool = True) -> NetOutput:
    if not tracks.normalized:
        raise ValueError("network input must be normalized tracks")
    latent = encode(tracks, params)
    return NetOutput(
        outlier_head(latent, params) if with_scores else None,
        camera_head(latent, tracks, params),
        point_head(latent, tracks, params),
    )


def to_dense(values: np.ndarray, tracks: TrackTensor) -> np.ndarray:
    """Scatter per-observation values into an m x n x ... array (zeros elsewhere)."""
    values = np.asarray(values)
    out = np.zeros((tracks.num_cameras, tracks.num_tracks) + values.shape[1:])
    out[tracks.cams, tracks.tracks] = values
    return out


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def format_checkpoint(params: ModelParams) -> str:
    c = params.config
    lines = [
        "# equisfm checkpoint v1",
        f"config width={c.width} encoder_layers={c.encoder_layers} "
        f"head_layers={c.head_layers} input_channels={c.input_channels}",
    ]
    for name, arr in params.tensors.items():
        lines.append(f"tensor {name} " + " ".join(map(str, arr.shape)))
        lines.append(" ".join(format(float(v), ".17g") for v in arr.reshape(-1)))
    return "\n".join(lines) + "\n"


def parse_checkpoint(text: str) -> ModelParams:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    if not lines or not lines[0].startswith("config "):
        raise ValueError("checkpoint is missing its config line")
    fields = dict(kv.split("=") for kv in lines[0].split()[1:])
    config = NetConfig(**{k: int(v) for k, v in fields.items()})
    tensors = {}
    body = lines[1:]
    if len(body) % 2:
        raise ValueError("truncated checkpoint")
    for head, values in zip(body[::2], body[1::2]):
        parts = head.split()
        if parts[0] != "tensor":
            raise ValueError(f"unexpected checkpoint line: {head[:40]}")
        shape = tuple(int(s) for s in parts[2:])
        arr = np.array([float(v) for v in values.split()])
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"{parts[1]}: expected {np.prod(shape)} values, got {arr.size}")
        tensors[parts[1]] = arr.reshape(shape)
    return ModelParams(tensors, config)
