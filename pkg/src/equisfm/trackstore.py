"""Sparse point-track tensor: construction, normalization, labeling, filtering.

A :class:`TrackTensor` stores the observed cells of an m x n x 2 tensor as flat
arrays. Rows are cameras and columns are tracks. Observations are kept sorted
by ``(track, camera)`` so that every filtering path preserves relative order.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .geometry import CameraPose, GeometryError, triangulate_from_matrices

log = logging.getLogger(__name__)

MIN_TRACK_VIEWS = 3
LABEL_THRESHOLD_PX = 4.0
OUTLIER_THRESHOLD = 0.6


@dataclass(frozen=True, eq=False)
class TrackTensor:
    """Immutable sparse track tensor.

    ``labels`` (True = outlier), ``keypoints`` and ``intrinsics`` are optional
    and travel with the observations through every filter. ``camera_ids`` and
    ``track_ids`` map compact row/column indices back to the ids of the
    tensor this one was derived from.
    """

    num_cameras: int
    num_tracks: int
    cams: np.ndarray
    tracks: np.ndarray
    xy: np.ndarray
    normalized: bool = False
    intrinsics: np.ndarray | None = None
    labels: np.ndarray | None = None
    keypoints: np.ndarray | None = None
    camera_ids: np.ndarray | None = None
    track_ids: np.ndarray | None = None

    def __post_init__(self):
        m, n = int(self.num_cameras), int(self.num_tracks)
        cams = np.asarray(self.cams, dtype=np.int64).reshape(-1)
        tracks = np.asarray(self.tracks, dtype=np.int64).reshape(-1)
        xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        p = len(cams)
        if len(tracks) != p or len(xy) != p:
            raise ValueError("cams, tracks and xy must have the same length")
        if p and (cams.min() < 0 or cams.max() >= m or tracks.min() < 0 or tracks.max() >= n):
            raise ValueError("observation index out of range")
        if not np.all(np.isfinite(xy)):
            raise ValueError("observation positions must be finite")
        order = np.lexsort((cams, tracks))
        cams, tracks, xy = cams[order], tracks[order], xy[order]
        if p > 1 and np.any((np.diff(tracks) == 0) & (np.diff(cams) == 0)):
            raise ValueError("duplicate observation for a (camera, track) pair")
        views = np.bincount(tracks, minlength=n)
        if n and views.min() < MIN_TRACK_VIEWS:
            raise ValueError(f"every track needs at least {MIN_TRACK_VIEWS} observations")

        def aligned(arr, dtype):
            if arr is None:
                return None
            arr = np.asarray(arr, dtype=dtype).reshape(-1)
            if len(arr) != p:
                raise ValueError("per-observation array has the wrong length")
            return arr[order]

        labels = aligned(self.labels, bool)
        keypoints = aligned(self.keypoints, np.int64)
        K = None
        if self.intrinsics is not None:
            K = np.asarray(self.intrinsics, dtype=np.float64).reshape(-1, 3, 3)
            if len(K) != m:
                raise ValueError("need one calibration matrix per camera")
        cam_ids = np.arange(m) if self.camera_ids is None else np.asarray(self.camera_ids, np.int64)
        trk_ids = np.arange(n) if self.track_ids is None else np.asarray(self.track_ids, np.int64)
        if len(cam_ids) != m or len(trk_ids) != n:
            raise ValueError("id maps must match tensor dimensions")
        for name, val in [
            ("num_cameras", m), ("num_tracks", n), ("cams", cams), ("tracks", tracks),
            ("xy", xy), ("normalized", bool(self.normalized)), ("intrinsics", K),
            ("labels", labels), ("keypoints", keypoints), ("camera_ids", cam_ids),
            ("track_ids", trk_ids),
        ]:
            if isinstance(val, np.ndarray):
                val.setflags(write=False)
            object.__setattr__(self, name, val)

    # -- basic views -------------------------------------------------------

    @property
    def num_observations(self) -> int:
        return len(self.cams)

    def mask(self) -> np.ndarray:
        out = np.zeros((self.num_cameras, self.num_tracks), dtype=bool)
        out[self.cams, self.tracks] = True
        return out

    def dense(self) -> np.ndarray:
        """m x n x 2 array with NaN at unobserved cells."""
        out = np.full((self.num_cameras, self.num_tracks, 2), np.nan)
        out[self.cams, self.tracks] = self.xy
        return out

    def views_per_track(self) -> np.ndarray:
        return np.bincount(self.tracks, minlength=self.num_tracks)

    def views_per_camera(self) -> np.ndarray:
        return np.bincount(self.cams, minlength=self.num_cameras)

    def focal_scale(self) -> np.ndarray:
        """Per-observation 2x2 matrix mapping normalized residuals to pixels."""
        if self.intrinsics is None:
            return np.broadcast_to(np.eye(2), (self.num_observations, 2, 2))
        return self.intrinsics[self.cams, :2, :2]

    def equals(self, other: "TrackTensor") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            self.num_cameras == other.num_cameras
            and self.num_tracks == other.num_tracks
            and self.normalized == other.normalized
            and all(
                same(getattr(self, f), getattr(other, f))
                for f in ("cams", "tracks", "xy", "intrinsics", "labels", "keypoints",
                          "camera_ids", "track_ids")
            )
        )

    def with_labels(self, labels) -> "TrackTensor":
        # observations are already canonically ordered, so the re-sort is a no-op
        return replace(self, labels=np.asarray(labels, dtype=bool))

    # -- filtering ---------------------------------------------------------

    def select(self, keep, min_views: int = MIN_TRACK_VIEWS) -> "TrackTensor":
        """Keep the flagged observations, then drop tracks with < ``min_views``.

        Surviving tracks are renumbered in their original order; cameras keep
        their indices.
        """
        keep = np.asarray(keep, dtype=bool).copy()
        views = np.bincount(self.tracks[keep], minlength=self.num_tracks)
        keep &= views[self.tracks] >= min_views
        alive = np.flatnonzero(views >= min_views)
        remap = np.full(self.num_tracks, -1, dtype=np.int64)
        remap[alive] = np.arange(len(alive))
        return TrackTensor(
            self.num_cameras,
            len(alive),
            self.cams[keep],
            remap[self.tracks[keep]],
            self.xy[keep],
            normalized=self.normalized,
            intrinsics=self.intrinsics,
            labels=None if self.labels is None else self.labels[keep],
            keypoints=None if self.keypoints is None else self.keypoints[keep],
            camera_ids=self.camera_ids,
            track_ids=self.track_ids[alive],
        )

    def restrict_cameras(self, cameras: Iterable[int], min_views: int = MIN_TRACK_VIEWS) -> "TrackTensor":
        """Sub-tensor on the given camera rows, renumbered compactly in original order."""
        cameras = np.unique(np.asarray(list(cameras), dtype=np.int64))
        t = self.select(np.isin(self.cams, cameras), min_views)
        remap = np.full(self.num_cameras, -1, dtype=np.int64)
        remap[cameras] = np.arange(len(cameras))
        return TrackTensor(
            len(cameras),
            t.num_tracks,
            remap[t.cams],
            t.tracks,
            t.xy,
            normalized=t.normalized,
            intrinsics=None if t.intrinsics is None else t.intrinsics[cameras],
            labels=t.labels,
            keypoints=t.keypoints,
            camera_ids=t.camera_ids[cameras],
            track_ids=t.track_ids,
        )

    def drop_empty_cameras(self) -> "TrackTensor":
        return self.restrict_cameras(np.flatnonzero(self.views_per_camera() > 0))


# ---------------------------------------------------------------------------
# construction from pairwise matches
# ---------------------------------------------------------------------------


class Match(NamedTuple):
    image_a: int
    keypoint_a: int
    xy_a: tuple[float, float]
    image_b: int
    keypoint_b: int
    xy_b: tuple[float, float]


class UnionFind:
    """Disjoint sets with path compression and union by size."""

    def __init__(self) -> None:
        self.parent: dict = {}
        self.size: dict = {}

    def find(self, x):
        if x not in self.parent:
            self.parent[x] = x
            self.size[x] = 1
            return x
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]

    def groups(self) -> list[list]:
        out: dict = {}
        for x in self.parent:
            out.setdefault(self.find(x), []).append(x)
        return list(out.values())


def chain_matches(matches: Sequence[Match], num_cameras: int | None = None) -> TrackTensor:
    """Chain two-view keypoint matches into tracks.

    Tracks holding two keypoints of one image (an inconsistent cycle) or seen
    by fewer than three images are discarded. Tracks are ordered by their
    smallest ``(image, keypoint)`` member.
    """
    uf = UnionFind()
    position: dict[tuple[int, int], tuple[float, float]] = {}
    for mt in matches:
        if mt.image_a == mt.image_b:
            raise ValueError(f"match within a single image: {mt}")
        a, b = (int(mt.image_a), int(mt.keypoint_a)), (int(mt.image_b), int(mt.keypoint_b))
        position.setdefault(a, tuple(mt.xy_a))
        position.setdefault(b, tuple(mt.xy_b))
        uf.union(a, b)
    if num_cameras is None:
        num_cameras = 1 + max((k[0] for k in position), default=-1)

    kept = []
    for members in uf.groups():
        images = [img for img, _ in members]
        if len(set(images)) != len(images) or len(images) < MIN_TRACK_VIEWS:
            continue
        kept.append(sorted(members))
    kept.sort(key=lambda ms: ms[0])

    cams, tracks, xy, kps = [], [], [], []
    for j, members in enumerate(kept):
        for img, kp in members:
            cams.append(img)
            tracks.append(j)
            xy.append(position[(img, kp)])
            kps.append(kp)
    return TrackTensor(
        num_cameras, len(kept), cams, tracks, np.reshape(xy, (-1, 2)), keypoints=kps
    )


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def normalize_tracks(t: TrackTensor, intrinsics=None) -> TrackTensor:
    """Map pixel positions to normalized camera coordinates with K^-1."""
    if t.normalized:
        raise ValueError("tracks are already normalized")
    K = t.intrinsics if intrinsics is None else np.asarray(intrinsics, dtype=np.float64)
    if K is None:
        raise ValueError("normalization needs intrinsics")
    K = np.broadcast_to(K.reshape(-1, 3, 3), (t.num_cameras, 3, 3)).copy()
    if np.any(np.abs(np.linalg.det(K)) < 1e-12):
        raise ValueError("singular calibration matrix")
    Kinv = np.linalg.inv(K)
    h = np.concatenate([t.xy, np.ones((t.num_observations, 1))], axis=1)
    n = np.einsum("kab,kb->ka", Kinv[t.cams], h)
    return replace(t, xy=n[:, :2] / n[:, 2:3], normalized=True, intrinsics=K)


def denormalize_tracks(t: TrackTensor) -> TrackTensor:
    """Inverse of :func:`normalize_tracks`."""
    if not t.normalized:
        raise ValueError("tracks are not normalized")
    h = np.concatenate([t.xy, np.ones((t.num_observations, 1))], axis=1)
    px = np.einsum("kab,kb->ka", t.intrinsics[t.cams], h)
    return replace(t, xy=px[:, :2] / px[:, 2:3], normalized=False)


# ---------------------------------------------------------------------------
# labeling and outlier removal
# ---------------------------------------------------------------------------


def _keys(t: TrackTensor, use_keypoints: bool) -> list[tuple]:
    cam_ids = t.camera_ids[t.cams]
    if use_keypoints:
        return [(int(c), int(k)) for c, k in zip(cam_ids, t.keypoints)]
    return [(int(c), float(x), float(y)) for c, (x, y) in zip(cam_ids, t.xy)]


def label_tracks(
    t: TrackTensor,
    reference_tracks: TrackTensor,
    reference_poses: dict[int, CameraPose],
    pixel_threshold: float = LABEL_THRESHOLD_PX,
) -> np.ndarray:
    """Inlier/outlier labels (True = outlier) against a reference reconstruction.

    Observations are identified across the two tensors by ``(camera id,
    keypoint id)`` when both carry keypoint ids, else by exact position. Each
    track is paired with the reference track sharing the most observations.
    Keypoints missing from that reference track are dropped, the track is
    triangulated with the reference poses from what remains, and the final
    label compares the pixel reprojection error of every original keypoint
    with ``pixel_threshold``.
    """
    if t.intrinsics is None:
        raise ValueError("labeling needs intrinsics to measure pixel error")
    use_kp = t.keypoints is not None and reference_tracks.keypoints is not None
    ref_track_of = dict(zip(_keys(reference_tracks, use_kp), reference_tracks.tracks.tolist()))
    if t.normalized:
        norm, pix = t.xy, None
    else:
        norm, pix = normalize_tracks(t).xy, t.xy
    keys = _keys(t, use_kp)
    scale = t.focal_scale()
    labels = np.ones(t.num_observations, dtype=bool)

    starts = np.flatnonzero(np.r_[True, np.diff(t.tracks) != 0])
    ends = np.r_[starts[1:], t.num_observations]
    for s, e in zip(starts, ends):
        refs = [ref_track_of.get(k) for k in keys[s:e]]
        votes = Counter(r for r in refs if r is not None)
        if votes:
            best = min(votes, key=lambda r: (-votes[r], r))
            clean = np.array([r == best for r in refs])
        else:
            clean = np.zeros(e - s, dtype=bool)
        idx = np.arange(s, e)
        cam_ids = t.camera_ids[t.cams[idx]]
        usable = clean & np.array([int(c) in reference_poses for c in cam_ids])
        if usable.sum() < 2:
            continue
        P = np.stack([reference_poses[int(c)].matrix for c in cam_ids[usable]])
        try:
            X = triangulate_from_matrices(P, norm[idx[usable]])
        except GeometryError:
            continue
        for k, c in zip(idx, cam_ids):
            pose = reference_poses.get(int(c))
            if pose is None:
                continue
            Xc = pose.R @ X + pose.t
            if Xc[2] <= 0:
                continue
            err = scale[k] @ (Xc[:2] / Xc[2] - norm[k])
            labels[k] = not np.linalg.norm(err) < pixel_threshold
    return labels


def remove_outliers(t: TrackTensor, scores, threshold: float = OUTLIER_THRESHOLD) -> TrackTensor:
    """Drop observations scored ``>= threshold`` and tracks left with < 3 views."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(scores) != t.num_observations:
        raise ValueError("scores are not aligned with observations")
    return t.select(scores < threshold)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def read_matches(path) -> list[Match]:
    """Line format: ``img_a kp_a x_a y_a img_b kp_b x_b y_b``."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        ia, ka, xa, ya, ib, kb, xb, yb = parts
        out.append(
            Match(int(ia), int(ka), (float(xa), float(ya)), int(ib), int(kb), (float(xb), float(yb)))
        )
    return out


def write_matches(path, matches: Sequence[Match]) -> None:
    lines = [
        f"{m.image_a} {m.keypoint_a} {_fmt(m.xy_a[0])} {_fmt(m.xy_a[1])} "
        f"{m.image_b} {m.keypoint_b} {_fmt(m.xy_b[0])} {_fmt(m.xy_b[1])}"
        for m in matches
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def format_tracks(t: TrackTensor) -> str:
    lines = [
        "# equisfm tracks v1",
        f"cameras {t.num_cameras}",
        f"tracks {t.num_tracks}",
        f"normalized {int(t.normalized)}",
        "camera_ids " + " ".join(map(str, t.camera_ids)),
        "track_ids " + " ".join(map(str, t.track_ids)),
    ]
    if t.intrinsics is not None:
        for i, K in enumerate(t.intrinsics):
            lines.append(f"K {i} " + " ".join(_fmt(v) for v in K.reshape(-1)))
    lines.append(
        f"observations {t.num_observations} labels {int(t.labels is not None)}"
        f" keypoints {int(t.keypoints is not None)}"
    )
    for k in range(t.num_observations):
        rec = f"{t.cams[k]} {t.tracks[k]} {_fmt(t.xy[k, 0])} {_fmt(t.xy[k, 1])}"
        if t.labels is not None:
            rec += f" {int(t.labels[k])}"
        if t.keypoints is not None:
            rec += f" {t.keypoints[k]}"
        lines.append(rec)
    return "\n".join(lines) + "\n"


def write_tracks(path, t: TrackTensor) -> None:
    Path(path).write_text(format_tracks(t))


def parse_tracks(text: str) -> TrackTensor:
    header: dict[str, list[str]] = {}
    K: dict[int, np.ndarray] = {}
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    it = iter(lines)
    for line in it:
        key, *rest = line.split()
        if key == "K":
            K[int(rest[0])] = np.array([float(v) for v in rest[1:]]).reshape(3, 3)
        elif key == "observations":
            header[key] = rest
            break
        else:
            header[key] = rest
    try:
        m = int(header["cameras"][0])
        n = int(header["tracks"][0])
        normalized = bool(int(header["normalized"][0]))
        p = int(header["observations"][0])
        has_labels = bool(int(header["observations"][2]))
        # the keypoint column is optional so older files still parse
        has_keypoints = len(header["observations"]) > 4 and bool(int(header["observations"][4]))
    except (KeyError, IndexError, ValueError) as exc:
        raise ValueError(f"malformed tracks header: {exc}") from None
    rows = [line.split() for line in it]
    if len(rows) != p:
        raise ValueError(f"expected {p} observation records, found {len(rows)}")
    width = 4 + has_labels + has_keypoints
    if any(len(r) != width for r in rows):
        raise ValueError(f"observation records must have {width} fields")
    arr = np.array(rows, dtype=object).reshape(-1, width)
    intrinsics = None
    if K:
        if sorted(K) != list(range(m)):
            raise ValueError("intrinsics must be given for every camera")
        intrinsics = np.stack([K[i] for i in range(m)])
    return TrackTensor(
        m,
        n,
        arr[:, 0].astype(np.int64),
        arr[:, 1].astype(np.int64),
        arr[:, 2:4].astype(np.float64),
        normalized=normalized,
        intrinsics=intrinsics,
        labels=arr[:, 4].astype(np.int64).astype(bool) if has_labels else None,
        keypoints=arr[:, width - 1].astype(np.int64) if has_keypoints else None,
        camera_ids=[int(v) for v in header.get("camera_ids", [])] or None,
        track_ids=[int(v) for v in header.get("track_ids", [])] or None,
    )


def read_tracks(path) -> TrackTensor:
    return parse_tracks(Path(path).read_text())
