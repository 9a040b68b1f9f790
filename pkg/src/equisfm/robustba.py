"""Levenberg-Marquardt bundle adjustment and the four-step robust refinement.

Residuals are in normalized image coordinates. Rotations are updated with a
left-multiplied rotation vector, ``q <- exp(delta) * q``, so the camera block
of the Jacobian is ``-[R X]_x`` for rotation and ``I`` for translation. Points
are eliminated with a Schur complement and the reduced camera system is solved
densely.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .geometry import (
    CameraPose,
    GeometryError,
    canonical_quat,
    quat_multiply,
    quat_to_rotmat,
    rotvec_to_quat,
    triangulate_from_matrices,
)
from .trackstore import MIN_TRACK_VIEWS, TrackTensor

log = logging.getLogger(__name__)

HUBER_DELTA = 0.1
MAX_ITERATIONS = 300
FILTER_PX = 5.0


@dataclass(frozen=True)
class RobustBAConfig:
    huber_delta: float = HUBER_DELTA
    # "px": delta is in pixels, scaled per camera by its focal length; "normalized": as is
    huber_units: str = "px"
    max_iterations: int = MAX_ITERATIONS
    reproj_filter_px: float = FILTER_PX
    min_views: int = MIN_TRACK_VIEWS
    initial_lambda: float = 1e-4
    function_tolerance: float = 1e-10
    parameter_tolerance: float = 1e-8

    def __post_init__(self):
        if min(self.huber_delta, self.max_iterations, self.reproj_filter_px, self.min_views) <= 0:
            raise ValueError("robust BA parameters must be positive")
        if self.huber_units not in ("px", "normalized"):
            raise ValueError("huber_units must be 'px' or 'normalized'")


@dataclass
class BAProblem:
    """Poses (m,), points (n, 3) and normalized observations with intrinsics."""

    poses: list[CameraPose]
    points: np.ndarray
    tracks: TrackTensor

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.poses) != self.tracks.num_cameras or len(self.points) != self.tracks.num_tracks:
            raise ValueError("poses/points do not match the track tensor")
        if not self.tracks.normalized:
            raise ValueError("bundle adjustment expects normalized tracks")

    def residuals(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-observation normalized residual (p, 2) and depth (p,)."""
        R = np.stack([p.R for p in self.poses])
        t = np.stack([p.t for p in self.poses])
        c, j = self.tracks.cams, self.tracks.tracks
        Xc = np.einsum("kab,kb->ka", R[c], self.points[j]) + t[c]
        return Xc[:, :2] / Xc[:, 2:3] - self.tracks.xy, Xc[:, 2]

    def pixel_errors(self) -> np.ndarray:
        r, _ = self.residuals()
        return np.linalg.norm(np.einsum("kab,kb->ka", self.tracks.focal_scale(), r), axis=1)


@dataclass
class BAReport:
    iterations: int
    initial_cost: float
    final_cost: float
    costs: list[float] = field(default_factory=list)
    status: str = "converged"


# ---------------------------------------------------------------------------
# LM solver
# ---------------------------------------------------------------------------


def _robust(r: np.ndarray, delta: np.ndarray | float | None) -> tuple[float, np.ndarray]:
    """Cost and IRLS weights for residual vectors r (p, 2)."""
    s = np.linalg.norm(r, axis=1)
    if delta is None:
        return 0.5 * float(np.sum(s * s)), np.ones(len(s))
    inside = s <= delta
    cost = np.where(inside, 0.5 * s * s, delta * s - 0.5 * delta * delta)
    w = np.where(inside, 1.0, delta / np.maximum(s, 1e-300))
    return float(np.sum(cost)), w


def _jacobians(R, t, X, cams, tracks):
    """d residual / d(camera rotvec, translation) (p,2,6) and d residual / d point (p,2,3)."""
    RX = (R[cams] @ X[tracks][:, :, None])[:, :, 0]
    Xc = RX + t[cams]
    z = Xc[:, 2]
    iz = 1.0 / z
    dpi = np.zeros((len(z), 2, 3))
    dpi[:, 0, 0] = iz
    dpi[:, 1, 1] = iz
    dpi[:, 0, 2] = -Xc[:, 0] * iz * iz
    dpi[:, 1, 2] = -Xc[:, 1] * iz * iz
    # d Xc / d rotvec = -[R X]_x
    x, y, w = RX[:, 0], RX[:, 1], RX[:, 2]
    neg_skew = np.zeros((len(z), 3, 3))
    neg_skew[:, 0, 1], neg_skew[:, 0, 2] = w, -y
    neg_skew[:, 1, 0], neg_skew[:, 1, 2] = -w, x
    neg_skew[:, 2, 0], neg_skew[:, 2, 1] = y, -x
    Jc = np.concatenate([dpi @ neg_skew, dpi], axis=2)
    Jp = dpi @ R[cams]
    return Jc, Jp


class _Structure:
    """Sparse aggregation operators for the Schur complement, fixed per problem."""

    def __init__(self, tracks: TrackTensor):
        self.m, self.n = tracks.num_cameras, tracks.num_tracks
        cams, trks = tracks.cams, tracks.tracks
        # observations are sorted by track, so pairs within a track are contiguous blocks
        starts = np.flatnonzero(np.r_[True, np.diff(trks) != 0])
        lengths = np.diff(np.r_[starts, len(trks)])
        first = np.repeat(starts, lengths * lengths)
        within = np.concatenate([np.arange(L * L) for L in lengths]) if len(lengths) else np.zeros(0, int)
        span = np.repeat(lengths, lengths * lengths)
        self.pa = first + within // np.maximum(span, 1)
        self.pb = first + within % np.maximum(span, 1)
        self.by_cam = _aggregator(cams, self.m)
        self.by_track = _aggregator(trks, self.n)
        self.by_pair = _aggregator(cams[self.pa] * self.m + cams[self.pb], self.m * self.m)


def _aggregator(ids: np.ndarray, num: int) -> sparse.csr_matrix:
    k = len(ids)
    return sparse.csr_matrix((np.ones(k), (ids, np.arange(k))), shape=(num, k))


def _agg(op: sparse.csr_matrix, values: np.ndarray) -> np.ndarray:
    return np.asarray(op @ values.reshape(len(values), -1)).reshape((op.shape[0],) + values.shape[1:])


def _solve_step(Jc, Jp, r, w, lam, st: _Structure, cams, tracks):
    m, n = st.m, st.n
    JcT = (Jc * w[:, None, None]).transpose(0, 2, 1)
    JpT = (Jp * w[:, None, None]).transpose(0, 2, 1)
    B = _agg(st.by_cam, JcT @ Jc)
    C = _agg(st.by_track, JpT @ Jp)
    E = JcT @ Jp
    gc = _agg(st.by_cam, (JcT @ r[:, :, None])[:, :, 0])
    gp = _agg(st.by_track, (JpT @ r[:, :, None])[:, :, 0])

    idx6, idx3 = np.arange(6), np.arange(3)
    B[:, idx6, idx6] = B[:, idx6, idx6] * (1.0 + lam) + 1e-12
    C[:, idx3, idx3] = C[:, idx3, idx3] * (1.0 + lam) + 1e-12
    Cinv = np.linalg.inv(C)

    F = E @ Cinv[tracks]  # (p, 6, 3)
    pair = F[st.pa] @ E[st.pb].transpose(0, 2, 1)
    S = -_agg(st.by_pair, pair).reshape(m, m, 6, 6)
    S[np.arange(m), np.arange(m)] += B
    S = S.transpose(0, 2, 1, 3).reshape(6 * m, 6 * m)
    rhs = -gc + _agg(st.by_cam, (F @ gp[tracks][:, :, None])[:, :, 0])
    dc = np.linalg.solve(S, rhs.reshape(-1)).reshape(m, 6)
    Etdc = _agg(st.by_track, (E.transpose(0, 2, 1) @ dc[cams][:, :, None])[:, :, 0])
    dp = (Cinv @ (-gp - Etdc)[:, :, None])[:, :, 0]
    return dc, dp


def bundle_adjust(
    problem: BAProblem, robust: bool = True, config: RobustBAConfig = RobustBAConfig()
) -> tuple[BAProblem, BAReport]:
    """Minimize the (Huber-robustified) reprojection cost over poses and points."""
    tracks = problem.tracks
    cams, trks = tracks.cams, tracks.tracks
    delta = None
    if robust:
        delta = config.huber_delta
        if config.huber_units == "px" and tracks.intrinsics is not None:
            K = tracks.intrinsics[cams]
            delta = delta / (0.5 * (K[:, 0, 0] + K[:, 1, 1]))
    q = np.stack([p.q for p in problem.poses])
    t = np.stack([p.t for p in problem.poses])
    X = problem.points.copy()

    def evaluate(q, t, X):
        R = quat_to_rotmat(q)
        Xc = np.einsum("kab,kb->ka", R[cams], X[trks]) + t[cams]
        with np.errstate(divide="ignore", invalid="ignore"):
            r = Xc[:, :2] / Xc[:, 2:3] - tracks.xy
        cost, w = _robust(r, delta)
        return R, r, cost, w

    R, r, cost, w = evaluate(q, t, X)
    report = BAReport(0, cost, cost, [cost])
    if tracks.num_observations == 0 or cost == 0.0:
        report.status = "zero residual" if cost == 0.0 else "empty"
        return problem, report
    if not np.isfinite(cost):
        raise ValueError("initial bundle adjustment cost is not finite")

    st = _Structure(tracks)
    lam = config.initial_lambda
    report.status = "max iterations"
    for it in range(1, config.max_iterations + 1):
        report.iterations = it
        Jc, Jp = _jacobians(R, t, X, cams, trks)
        try:
            dc, dp = _solve_step(Jc, Jp, r, w, lam, st, cams, trks)
        except np.linalg.LinAlgError:
            dc = None
        if dc is not None and np.all(np.isfinite(dc)) and np.all(np.isfinite(dp)):
            step = np.sqrt(np.sum(dc * dc) + np.sum(dp * dp))
            size = np.sqrt(np.sum(t * t) + np.sum(X * X))
            if step <= config.parameter_tolerance * (size + config.parameter_tolerance):
                report.status = "converged"
                break
            q_new = quat_multiply(rotvec_to_quat(dc[:, :3]), q)
            q_new /= np.linalg.norm(q_new, axis=1, keepdims=True)
            t_new, X_new = t + dc[:, 3:], X + dp
            R_new, r_new, cost_new, w_new = evaluate(q_new, t_new, X_new)
        else:
            cost_new = np.inf
        if np.isfinite(cost_new) and cost_new < cost:
            decrease = (cost - cost_new) / cost
            q, t, X, R, r, w, cost = q_new, t_new, X_new, R_new, r_new, w_new, cost_new
            report.costs.append(cost)
            lam = max(lam / 10.0, 1e-15)
            if decrease < config.function_tolerance or cost == 0.0:
                report.status = "converged"
                break
        else:
            lam *= 10.0
            if lam > 1e16:
                report.status = "damping exhausted"
                log.warning("bundle adjustment stopped: normal equations rank-deficient at all damping levels")
                break
    report.final_cost = cost
    poses = [CameraPose(qi, ti) for qi, ti in zip(canonical_quat(q), t)]
    return BAProblem(poses, X, tracks), report


# ---------------------------------------------------------------------------
# robust refinement steps
# ---------------------------------------------------------------------------


def filter_points(problem: BAProblem, config: RobustBAConfig = RobustBAConfig()) -> BAProblem:
    """Drop points whose max pixel error exceeds the threshold or with too few views."""
    err = problem.pixel_errors()
    _, depth = problem.residuals()
    tracks = problem.tracks
    worst = np.full(tracks.num_tracks, -np.inf)
    np.maximum.at(worst, tracks.tracks, np.where(depth > 0, err, np.inf))
    keep_track = worst <= config.reproj_filter_px
    filtered = tracks.select(keep_track[tracks.tracks], min_views=config.min_views)
    if filtered.num_tracks == 0:
        raise ValueError("every point was removed by the reprojection/view filter")
    survivors = np.flatnonzero(keep_track & (tracks.views_per_track() >= config.min_views))
    return BAProblem(problem.poses, problem.points[survivors], filtered)


@dataclass(frozen=True)
class ViewGraph:
    num_cameras: int
    edges: frozenset

    @classmethod
    def from_tracks(cls, tracks: TrackTensor) -> "ViewGraph":
        edges = set()
        starts = np.flatnonzero(np.r_[True, np.diff(tracks.tracks) != 0])
        for s, e in zip(starts, np.r_[starts[1:], tracks.num_observations]):
            cs = tracks.cams[s:e]
            for a in range(len(cs)):
                for b in range(a + 1, len(cs)):
                    edges.add((int(min(cs[a], cs[b])), int(max(cs[a], cs[b]))))
        return cls(tracks.num_cameras, frozenset(edges))

    def components(self, nodes: Sequence[int] | None = None) -> list[list[int]]:
        """Connected components among ``nodes`` (all cameras by default), each sorted."""
        nodes = np.arange(self.num_cameras) if nodes is None else np.unique(np.asarray(nodes, dtype=np.int64))
        if len(nodes) == 0:
            return []
        local = {int(v): k for k, v in enumerate(nodes)}
        pairs = [(local[a], local[b]) for a, b in self.edges if a in local and b in local]
        rows, cols = (np.array(x, dtype=np.int64) for x in zip(*pairs)) if pairs else (np.zeros(0, int),) * 2
        adj = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(nodes), len(nodes)))
        _, label = connected_components(adj, directed=False)
        comps: dict[int, list[int]] = {}
        for v, c in zip(nodes.tolist(), label.tolist()):
            comps.setdefault(c, []).append(v)
        return sorted(comps.values())


def largest_component(graph: ViewGraph, nodes: Sequence[int] | None = None) -> list[int]:
    """Cameras of the largest connected component; ties go to the one holding the lowest index."""
    comps = graph.components(nodes)
    if not comps:
        raise ValueError("view graph is empty")
    return max(comps, key=lambda c: (len(c), -c[0]))


def retriangulate(problem: BAProblem) -> BAProblem:
    """Re-estimate every point by DLT from the current poses; drop untriangulatable tracks."""
    tracks = problem.tracks
    P = np.stack([p.matrix for p in problem.poses])
    X = np.zeros((tracks.num_tracks, 3))
    ok = np.ones(tracks.num_tracks, dtype=bool)
    starts = np.flatnonzero(np.r_[True, np.diff(tracks.tracks) != 0])
    for j, (s, e) in enumerate(zip(starts, np.r_[starts[1:], tracks.num_observations])):
        try:
            X[j] = triangulate_from_matrices(P[tracks.cams[s:e]], tracks.xy[s:e])
        except GeometryError:
            ok[j] = False
    filtered = tracks.select(ok[tracks.tracks])
    return BAProblem(problem.poses, X[ok], filtered)


@dataclass
class PipelineResult:
    poses: list[CameraPose]
    points: np.ndarray
    tracks: TrackTensor
    registered: list[int]
    reports: list[BAReport]
    runtime_seconds: float

    @property
    def num_registered(self) -> int:
        return len(self.registered)

    def mean_reprojection_px(self) -> float:
        return float(np.mean(BAProblem(self.poses, self.points, self.tracks).pixel_errors()))


def robust_ba_pipeline(
    poses: Sequence[CameraPose],
    points: np.ndarray,
    tracks: TrackTensor,
    config: RobustBAConfig = RobustBAConfig(),
) -> PipelineResult:
    """Huber BA, error/view filter, largest view-graph component, retriangulate, plain BA.

    ``registered`` lists camera rows of ``tracks`` that survive; poses of the
    other rows are returned unchanged and should be ignored.
    """
    start = time.perf_counter()
    problem = BAProblem(list(poses), points, tracks)
    problem, r1 = bundle_adjust(problem, robust=True, config=config)
    problem = filter_points(problem, config)

    observed = np.flatnonzero(problem.tracks.views_per_camera() > 0)
    keep = largest_component(ViewGraph.from_tracks(problem.tracks), observed.tolist())
    if len(keep) < len(observed):
        dropped = np.setdiff1d(np.arange(tracks.num_cameras), keep)
        t = problem.tracks
        touches = np.zeros(t.num_tracks, dtype=bool)
        touches[t.tracks[np.isin(t.cams, dropped)]] = True
        t2 = t.select(~touches[t.tracks])
        if t2.num_tracks == 0:
            raise ValueError("no tracks left in the largest view-graph component")
        problem = BAProblem(problem.poses, problem.points[~touches], t2)

    problem = retriangulate(problem)
    problem, r2 = bundle_adjust(problem, robust=False, config=config)
    registered = np.flatnonzero(problem.tracks.views_per_camera() > 0).tolist()
    if not registered:
        raise ValueError("no cameras survived robust bundle adjustment")
    return PipelineResult(
        problem.poses, problem.points, problem.tracks, registered, [r1, r2], time.perf_counter() - start
    )


def metrics_report(result: PipelineResult, errors=None) -> dict:
    """JSON-ready report; pose error fields are filled when ``errors`` is given."""
    out = {
        "N_c": int(result.tracks.num_cameras),
        "N_r": result.num_registered,
        "mean_reprojection_px": result.mean_reprojection_px(),
        "runtime_seconds": result.runtime_seconds,
    }
    if errors is not None:
        out.update(errors.summary())
    return out


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
