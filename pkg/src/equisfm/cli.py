"""Command line entry point: ``equisfm <command> [flags]``.

Commands mirror the pipeline stages: ``synth`` -> ``train`` -> ``infer`` ->
``ba`` -> ``eval`` / ``export``; ``tracks`` builds a track file from pairwise
matches. Exit status is 0 on success, 2 on usage errors, 3 on bad input data
and 4 on numerical failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import geometry as geo
from . import robustba, synth, training, trackstore
from .equinet import ModelParams, NetConfig
from .trackstore import Match, normalize_tracks

log = logging.getLogger("equisfm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_SEED = 20


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _read_scores(path) -> np.ndarray:
    return np.array([float(v) for v in Path(path).read_text().split()])


def _write_scores(path, scores) -> None:
    Path(path).write_text("".join(format(float(s), ".17g") + "\n" for s in scores))


def _write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def tracks_to_matches(t: trackstore.TrackTensor) -> list[Match]:
    """Consecutive-view matches along every track.

    Keypoint ids come from the tensor when it carries them, else the track id is used.
    """
    kps = t.keypoints if t.keypoints is not None else t.track_ids[t.tracks]
    out = []
    for j in range(t.num_tracks):
        rows = np.flatnonzero(t.tracks == j)
        for a, b in zip(rows[:-1], rows[1:]):
            out.append(
                Match(
                    int(t.camera_ids[t.cams[a]]), int(kps[a]), tuple(t.xy[a]),
                    int(t.camera_ids[t.cams[b]]), int(kps[b]), tuple(t.xy[b]),
                )
            )
    return out


def _load_scene_tracks(path) -> trackstore.TrackTensor:
    """A tracks file, or a directory produced by ``synth`` holding ``tracks.txt``."""
    path = Path(path)
    if path.is_dir():
        path = path / "tracks.txt"
    t = trackstore.read_tracks(path)
    return t if t.normalized else normalize_tracks(t)


def evaluate(pred: dict[int, geo.CameraPose], gt: dict[int, geo.CameraPose]) -> dict:
    """Metrics over cameras present in both maps, after similarity alignment."""
    shared = sorted(set(pred) & set(gt))
    report = {"N_c": len(gt), "N_r": len(shared)}
    if len(shared) < 3:
        raise DataError("evaluation needs at least 3 registered cameras with ground truth")
    p = [pred[c] for c in shared]
    g = [gt[c] for c in shared]
    report.update(geo.pose_errors(p, g, geo.align_similarity(p, g)).summary())
    return report


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    config = synth.SceneConfig(
        num_cameras=args.cameras,
        num_points=args.points,
        noise_sigma_px=args.noise,
        outlier_rate=args.outliers,
        visibility_rate=args.visibility,
        focal_px=args.focal,
        seed=args.seed,
    )
    scene = synth.generate_scene(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trackstore.write_tracks(out / "tracks.txt", scene.tracks)
    # inlier-only tracks: a reference reconstruction for `tracks --reference`
    trackstore.write_tracks(out / "reference_tracks.txt", scene.tracks.select(~scene.tracks.labels))
    trackstore.write_matches(out / "matches.txt", tracks_to_matches(scene.tracks))
    geo.write_poses(out / "gt_poses.txt", dict(enumerate(scene.gt_poses)))
    geo.write_points(out / "gt_points.txt", dict(enumerate(scene.gt_points)))
    return EXIT_OK


def cmd_tracks(args) -> int:
    matches = trackstore.read_matches(args.matches)
    t = trackstore.chain_matches(matches)
    if args.focal is not None:
        w, h = args.image_size
        K = np.array([[args.focal, 0.0, w / 2.0], [0.0, args.focal, h / 2.0], [0.0, 0.0, 1.0]])
        t = replace(t, intrinsics=np.broadcast_to(K, (t.num_cameras, 3, 3)))
    if args.reference:
        ref = trackstore.read_tracks(args.reference)
        poses = geo.read_poses(args.reference_poses)
        t = t.with_labels(trackstore.label_tracks(t, ref, poses, args.label_threshold))
    trackstore.write_tracks(args.out, t)
    return EXIT_OK


def cmd_train(args) -> int:
    scenes = [_load_scene_tracks(p) for p in args.scenes]
    val = [_load_scene_tracks(p) for p in args.val]
    config = training.TrainConfig(
        learning_rate=args.lr,
        max_epochs=args.epochs,
        patience=args.patience,
        validate_every=args.validate_every,
        seed=args.seed,
    )
    net = NetConfig(width=args.width)
    lines = ["epoch train_loss val_loss"]
    result = training.train(
        scenes, val, config, net,
        on_epoch=lambda e, tl, vl: lines.append(f"{e} {tl:.17g} {vl:.17g}"),
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    result.params.save(args.out)
    if args.log:
        lines.append(f"# best_epoch {result.best_epoch}")
        _write_text(args.log, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_infer(args) -> int:
    tracks = _load_scene_tracks(args.tracks)
    params = ModelParams.load(args.model)
    config = training.TrainConfig(
        finetune_epochs=args.epochs, outlier_threshold=args.threshold, seed=args.seed
    )
    inf = training.infer(tracks, params, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    geo.write_poses(out / "poses.txt", inf.poses)
    geo.write_points(out / "points.txt", inf.points)
    _write_scores(out / "scores.txt", inf.scores)
    trackstore.write_tracks(out / "filtered_tracks.txt", inf.filtered)
    return EXIT_OK


def cmd_ba(args) -> int:
    tracks = _load_scene_tracks(args.tracks)
    poses = geo.read_poses(args.poses)
    points = geo.read_points(args.points)
    try:
        P0 = [poses[int(c)] for c in tracks.camera_ids]
        X0 = np.stack([points[int(j)] for j in tracks.track_ids])
    except KeyError as exc:
        raise DataError(f"no initial estimate for id {exc.args[0]}") from None
    config = robustba.RobustBAConfig(huber_delta=args.huber_delta)
    res = robustba.robust_ba_pipeline(P0, X0, tracks, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cam_ids = res.tracks.camera_ids
    geo.write_poses(out / "poses.txt", {int(cam_ids[k]): res.poses[k] for k in res.registered})
    geo.write_points(out / "points.txt", dict(zip(res.tracks.track_ids.tolist(), res.points)))
    trackstore.write_tracks(out / "tracks.txt", res.tracks)
    _write_text(out / "report.json", robustba.dumps_report(robustba.metrics_report(res)) + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    report = evaluate(geo.read_poses(args.pred), geo.read_poses(args.gt))
    if args.tracks and args.scores:
        t = trackstore.read_tracks(args.tracks)
        if t.labels is None:
            raise DataError("classification metrics need a labeled tracks file")
        scores = _read_scores(args.scores)
        if len(scores) != t.num_observations:
            raise DataError("scores do not match the number of observations")
        report.update(synth.scene_metrics(t.labels, scores, args.threshold))
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        _write_text(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_export(args) -> int:
    poses = geo.read_poses(args.poses)
    points = geo.read_points(args.points) if args.points else {}
    X = np.stack([points[j] for j in sorted(points)]) if points else np.zeros((0, 3))
    C = np.stack([poses[c].center for c in sorted(poses)]) if poses else np.zeros((0, 3))
    geo.write_ply(args.out, X, C)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, help="random seed (default 20)")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="equisfm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scene")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--cameras", type=int, default=20)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--noise", type=float, default=1.0, help="pixel noise sigma")
    p.add_argument("--outliers", type=float, default=0.2, help="outlier rate")
    p.add_argument("--visibility", type=float, default=0.5)
    p.add_argument("--focal", type=float, default=500.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tracks", parents=[common], help="chain pairwise matches into tracks")
    p.add_argument("--matches", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--focal", type=float, default=None, help="attach a shared pinhole K")
    p.add_argument("--image-size", type=int, nargs=2, default=(640, 480), metavar=("W", "H"))
    p.add_argument("--reference", help="reference tracks file used for labeling")
    p.add_argument("--reference-poses", help="reference poses for labeling")
    p.add_argument("--label-threshold", type=float, default=trackstore.LABEL_THRESHOLD_PX)
    p.set_defaults(func=cmd_tracks)

    p = sub.add_parser("train", parents=[common], help="train on labeled scenes")
    p.add_argument("--scenes", nargs="+", required=True, help="scene dirs or tracks files")
    p.add_argument("--val", nargs="*", default=[], help="validation scenes")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log path")
    p.add_argument("--epochs", type=int, default=training.TrainConfig.max_epochs)
    p.add_argument("--patience", type=int, default=training.TrainConfig.patience)
    p.add_argument("--validate-every", type=int, default=1)
    p.add_argument("--lr", type=float, default=training.TrainConfig.learning_rate)
    p.add_argument("--width", type=int, default=NetConfig.width)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="classify, filter and fine-tune on one scene")
    p.add_argument("--tracks", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=training.TrainConfig.finetune_epochs)
    p.add_argument("--threshold", type=float, default=trackstore.OUTLIER_THRESHOLD)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ba", parents=[common], help="robust bundle adjustment")
    p.add_argument("--tracks", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--huber-delta", type=float, default=robustba.HUBER_DELTA, help="pixels")
    p.set_defaults(func=cmd_ba)

    p = sub.add_parser("eval", parents=[common], help="pose errors against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--tracks", help="labeled tracks for classification metrics")
    p.add_argument("--scores", help="per-observation outlier scores")
    p.add_argument("--threshold", type=float, default=trackstore.OUTLIER_THRESHOLD)
    p.add_argument("--out", help="also write the JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", parents=[common], help="write an ASCII PLY")
    p.add_argument("--poses", required=True)
    p.add_argument("--points")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"equisfm: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (np.linalg.LinAlgError, NumericalError, FloatingPointError) as exc:
        print(f"equisfm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except geo.GeometryError as exc:
        print(f"equisfm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, KeyError) as exc:
        print(f"equisfm: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
