"""Command-line pipeline driver.

Every stage is a subcommand that reads/writes FPT1 containers and prints a
machine-readable JSON summary (sorted keys, no timestamps) to stdout, so
identical seeds produce byte-identical artifacts and summaries. Module-level
rejections exit with code 1 and a structured error object; usage errors exit
with code 2.

Configuration precedence: command-line flags > TOML config file (--config)
> built-in defaults. The fully resolved configuration is echoed in every
summary.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import containers, geometry
from .containers import ContainerError, LabelMap, SemanticScores, UNLABELED
from .gradcheck import run_loss_check
from .losses import LossWeights
from .superpoints import align_views, build_superpoints
from .synthetic import SceneConfig, SceneFrame, SyntheticScene, generate_scene, synthetic_scores
from .trainer import (TrainConfig, TrainState, alignment_stats,
                      build_training_batch, save_checkpoint, train_step)
from .voting import VoteConfig, VoteFrame, miou, vote

log = logging.getLogger("fusionpt")


@dataclass
class RunConfig:
    """Shared knobs across subcommands, resolved from flags/file/defaults."""

    seed: int = 0
    steps: int = 200
    tau: float = 0.07
    sigma: float = 0.25
    learning_rate: float = 0.1
    timespan: float = 0.5
    sweeps: int = 2
    w_spatial: float = 1.0
    w_temporal: float = 1.0
    w_cross: float = 1.0
    w_d2s: float = 1.0
    frames: int = 3
    objects: int = 4
    cameras: int = 2
    classes: int = 3
    points: int = 300
    score_noise: float = 0.0

    @classmethod
    def resolve(cls, args: argparse.Namespace) -> "RunConfig":
        file_values = {}
        config_path = getattr(args, "config", None)
        if config_path:
            with open(config_path, "rb") as fh:
                file_values = tomllib.load(fh)
        values = {}
        for f in fields(cls):
            flag = getattr(args, f.name, None)
            if flag is not None:
                values[f.name] = flag
            elif f.name in file_values:
                values[f.name] = type(f.default)(file_values[f.name])
        return cls(**values)


def _emit(payload: dict) -> None:
    json.dump(payload, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _scene_config(cfg: RunConfig) -> SceneConfig:
    return SceneConfig(n_frames=cfg.frames, n_objects=cfg.objects,
                       n_cameras=cfg.cameras, n_classes=cfg.classes,
                       timestep=cfg.timespan, points_per_object=cfg.points)


# ---------------------------------------------------------------------------
# Scene directory layout
# ---------------------------------------------------------------------------


def write_scene_dir(scene: SyntheticScene, out_dir: Path, cfg: RunConfig) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed + 1)
    files = {}
    for j, cam in enumerate(scene.cameras):
        path = out_dir / f"calib_cam{j}.json"
        geometry.save_calibration(path, cam)
        files[path.name] = _sha256(path)
    poses_path = out_dir / "poses.txt"
    geometry.save_poses(poses_path, [frame.pose for frame in scene.frames])
    files[poses_path.name] = _sha256(poses_path)
    for fi, frame in enumerate(scene.frames):
        frame_dir = out_dir / f"frame{fi:03d}"
        frame_dir.mkdir(exist_ok=True)
        containers.save_point_cloud(frame_dir / "cloud.fpt", frame.cloud)
        containers.save_label_vector(frame_dir / "gt_class.fpt", frame.gt_class)
        containers.save_label_vector(frame_dir / "gt_instance.fpt", frame.gt_instance)
        scores = synthetic_scores(frame.gt_class, scene.config.n_classes,
                                  cfg.score_noise, rng)
        containers.save_scores(frame_dir / "scores.fpt", scores)
        for j in range(len(scene.cameras)):
            containers.save_label_map(frame_dir / f"labels_cam{j}.fpt",
                                      frame.label_maps[j])
            containers.save_feature_map(frame_dir / f"features_cam{j}.fpt",
                                        frame.feature_maps[j])
        for path in sorted(frame_dir.iterdir()):
            files[f"{frame_dir.name}/{path.name}"] = _sha256(path)
    meta = {
        "n_frames": len(scene.frames),
        "n_cameras": len(scene.cameras),
        "n_classes": scene.config.n_classes,
        "timestep": scene.timestep,
        "instance_classes": {str(k): v for k, v in sorted(scene.instance_classes.items())},
    }
    meta_path = out_dir / "scene.json"
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    files[meta_path.name] = _sha256(meta_path)
    return files


def load_scene_dir(scene_dir) -> SyntheticScene:
    scene_dir = Path(scene_dir)
    with open(scene_dir / "scene.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    cameras = tuple(geometry.load_calibration(scene_dir / f"calib_cam{j}.json")
                    for j in range(meta["n_cameras"]))
    poses = geometry.load_poses(scene_dir / "poses.txt")
    frames = []
    for fi in range(meta["n_frames"]):
        frame_dir = scene_dir / f"frame{fi:03d}"
        cloud = containers.load_point_cloud(frame_dir / "cloud.fpt")
        gt_class = containers.load_label_vector(frame_dir / "gt_class.fpt")
        gt_instance = containers.load_label_vector(frame_dir / "gt_instance.fpt")
        label_maps = tuple(containers.load_label_map(frame_dir / f"labels_cam{j}.fpt")
                           for j in range(meta["n_cameras"]))
        feature_maps = tuple(containers.load_feature_map(frame_dir / f"features_cam{j}.fpt")
                             for j in range(meta["n_cameras"]))
        frames.append(SceneFrame(cloud=cloud, pose=poses[fi], gt_class=gt_class,
                                 gt_instance=gt_instance, label_maps=label_maps,
                                 feature_maps=feature_maps))
    config = SceneConfig(n_frames=meta["n_frames"], n_cameras=meta["n_cameras"],
                         n_classes=meta["n_classes"], timestep=meta["timestep"])
    instance_classes = {int(k): int(v) for k, v in meta["instance_classes"].items()}
    return SyntheticScene(tuple(frames), cameras, (), instance_classes,
                          np.zeros((0, 0)), meta["timestep"], config)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_scene(args) -> dict:
    cfg = RunConfig.resolve(args)
    scene = generate_scene(cfg.seed, _scene_config(cfg))
    files = write_scene_dir(scene, Path(args.out), cfg)
    return {"command": "gen-scene", "config": asdict(cfg), "out": str(args.out),
            "files": files,
            "points_per_frame": [len(f.cloud) for f in scene.frames]}


def cmd_project(args) -> dict:
    cfg = RunConfig.resolve(args)
    cloud = containers.load_point_cloud(args.cloud)
    cam = geometry.load_calibration(args.calib)
    proj = geometry.project_points(cloud, cam.intrinsics, cam.extrinsic,
                                   camera_index=args.camera_index)
    table = np.column_stack([proj.point_index.astype(np.float64),
                             np.full(len(proj), float(proj.camera_index)),
                             proj.u, proj.v, proj.depth])
    summary = {"command": "project", "config": asdict(cfg),
               "total_points": len(cloud), "projected": len(proj)}
    if args.out:
        containers.save_tensor(args.out, table)
        summary["out"] = str(args.out)
        summary["sha256"] = _sha256(args.out)
    return summary


def _load_cameras_and_maps(args):
    cams = [geometry.load_calibration(p) for p in args.calib]
    maps = [containers.load_label_map(p) for p in args.maps]
    return cams, maps


def cmd_superpoints(args) -> dict:
    cfg = RunConfig.resolve(args)
    cloud = containers.load_point_cloud(args.cloud)
    cams, maps = _load_cameras_and_maps(args)
    index = build_superpoints(cloud, cams, maps)
    group_of = np.where(index.group_of >= 0, index.group_of, UNLABELED).astype(np.uint32)
    containers.save_label_vector(args.out, group_of)
    return {
        "command": "superpoints", "config": asdict(cfg),
        "out": str(args.out), "sha256": _sha256(args.out),
        "num_regions": index.num_regions,
        "matched_points": int((index.group_of >= 0).sum()),
        "regions": [{"camera": m.camera_index, "superpixel": m.superpixel_id,
                     "area": m.pixel_area, "points": int(len(r))}
                    for m, r in zip(index.region_meta, index.regions)],
    }


def cmd_align_views(args) -> dict:
    cfg = RunConfig.resolve(args)
    cloud = containers.load_point_cloud(args.cloud)
    cams, maps = _load_cameras_and_maps(args)
    with open(args.classes, "r", encoding="utf-8") as fh:
        instance_classes = {int(k): int(v) for k, v in json.load(fh).items()}
    result = align_views(maps, instance_classes, cloud, cams)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for j, lmap in enumerate(result.class_maps):
        path = out_dir / f"aligned_cam{j}.fpt"
        containers.save_label_map(path, lmap)
        files[path.name] = _sha256(path)
    classes_path = out_dir / "classes.json"
    with open(classes_path, "w", encoding="utf-8") as fh:
        json.dump({str(k): v for k, v in sorted(result.instance_classes.items())},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    files[classes_path.name] = _sha256(classes_path)
    return {"command": "align-views", "config": asdict(cfg), "out": str(out_dir),
            "files": files, "conflict_points": result.num_conflict_points}


def cmd_aggregate(args) -> dict:
    cfg = RunConfig.resolve(args)
    keyframe = containers.load_point_cloud(args.keyframe)
    poses = geometry.load_poses(args.poses)
    target = poses[args.keyframe_index]
    sweeps = []
    for path, idx in zip(args.sweep, args.sweep_index):
        rel = geometry.compose(target.inverse(), poses[idx])
        sweeps.append((containers.load_point_cloud(path), rel))
    dense = geometry.aggregate_sweeps(keyframe, sweeps)
    containers.save_point_cloud(args.out, dense)
    return {"command": "aggregate", "config": asdict(cfg), "out": str(args.out),
            "sha256": _sha256(args.out), "keyframe_points": len(keyframe),
            "dense_points": len(dense)}


def cmd_pretrain(args) -> dict:
    cfg = RunConfig.resolve(args)
    if args.scene_dir:
        scene = load_scene_dir(args.scene_dir)
    else:
        scene = generate_scene(cfg.seed, _scene_config(cfg))
    batch = build_training_batch(scene, sweep_count=cfg.sweeps)

    weights = LossWeights(spatial=cfg.w_spatial, temporal=cfg.w_temporal,
                          cross=cfg.w_cross, d2s=cfg.w_d2s)
    train_cfg = TrainConfig(tau=cfg.tau, learning_rate=cfg.learning_rate,
                            weights=weights)
    center = len(scene.frames) // 2
    point_in_dim = 3 + scene.frames[center].cloud.attr_width
    feature_dim = scene.frames[center].feature_maps[0].channels
    state = TrainState.init(cfg.seed, point_in_dim, feature_dim, train_cfg)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    history = []
    breakdown = None
    for _ in range(cfg.steps):
        state, breakdown = train_step(state, batch)
        history.append(breakdown)
    loss_csv = out_dir / "losses.csv"
    with open(loss_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "total", "spatial", "temporal", "cross", "d2s"])
        for step, row in enumerate(history):
            writer.writerow([step, repr(row["total"]), repr(row["spatial"]),
                             repr(row["temporal"]), repr(row["cross"]),
                             repr(row["d2s"])])
    save_checkpoint(out_dir / "checkpoint", state)
    matched, mismatched = alignment_stats(state, batch)

    initial = history[0]["total"] if history else float("nan")
    final = history[-1]["total"] if history else float("nan")
    return {
        "command": "pretrain", "config": asdict(cfg), "out": str(out_dir),
        "losses_csv": {"path": str(loss_csv), "sha256": _sha256(loss_csv)},
        "steps": cfg.steps,
        "initial_total": initial,
        "final_total": final,
        "loss_ratio": (final / initial) if history and initial else float("nan"),
        "matched_similarity": matched,
        "mismatched_similarity": mismatched,
        "separation": matched - mismatched,
        "missing_terms": history[-1]["missing"] if history else [],
    }


def cmd_loss_check(args) -> dict:
    cfg = RunConfig.resolve(args)
    report = run_loss_check(instances=args.instances, seed=cfg.seed,
                            taus=(1.0, 0.1, cfg.tau))
    report["command"] = "loss-check"
    report["config"] = asdict(cfg)
    return report


def cmd_vote(args) -> dict:
    cfg = RunConfig.resolve(args)
    poses = geometry.load_poses(args.poses)

    def frame(cloud_path, scores_path, pose_index):
        return VoteFrame(containers.load_point_cloud(cloud_path),
                         containers.load_scores(scores_path),
                         poses[pose_index])

    prev = frame(args.prev, args.scores_prev, args.prev_index)
    curr = frame(args.curr, args.scores_curr, args.curr_index)
    next_ = frame(args.next, args.scores_next, args.next_index)
    scores, labels = vote(prev, curr, next_, VoteConfig(sigma=cfg.sigma))
    containers.save_scores(args.out_scores, scores)
    containers.save_label_vector(args.out_labels, labels)
    return {"command": "vote", "config": asdict(cfg),
            "out_scores": str(args.out_scores),
            "out_labels": str(args.out_labels),
            "scores_sha256": _sha256(args.out_scores),
            "labels_sha256": _sha256(args.out_labels),
            "points": scores.rows}


def cmd_eval(args) -> dict:
    cfg = RunConfig.resolve(args)
    pred = containers.load_label_vector(args.pred)
    truth = containers.load_label_vector(args.truth)
    result = miou(pred, truth, args.classes if args.classes else cfg.classes,
                  ignore_label=args.ignore)
    per_class = {f"class_{c}": (None if np.isnan(v) else v)
                 for c, v in enumerate(result.per_class)}
    return {"command": "eval", "config": asdict(cfg),
            "per_class_iou": per_class, "miou": result.mean}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML file with default values")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--tau", type=float)
    parser.add_argument("--sigma", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusionpt",
        description="LiDAR-camera pretraining pipeline stages")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a deterministic synthetic scene")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int)
    p.add_argument("--objects", type=int)
    p.add_argument("--cameras", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--points", type=int)
    p.add_argument("--timespan", type=float)
    p.add_argument("--score-noise", dest="score_noise", type=float)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("project", help="project a cloud through a calibration")
    _add_common(p)
    p.add_argument("--cloud", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--camera-index", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("superpoints", help="group points by superpixel regions")
    _add_common(p)
    p.add_argument("--cloud", required=True)
    p.add_argument("--calib", action="append", required=True)
    p.add_argument("--maps", action="append", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_superpoints)

    p = sub.add_parser("align-views", help="unify conflicting classes across cameras")
    _add_common(p)
    p.add_argument("--cloud", required=True)
    p.add_argument("--calib", action="append", required=True)
    p.add_argument("--maps", action="append", required=True)
    p.add_argument("--classes", required=True, help="JSON instance->class mapping")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_align_views)

    p = sub.add_parser("aggregate", help="ego-motion compensated sweep concatenation")
    _add_common(p)
    p.add_argument("--keyframe", required=True)
    p.add_argument("--keyframe-index", type=int, required=True)
    p.add_argument("--sweep", action="append", default=[])
    p.add_argument("--sweep-index", type=int, action="append", default=[])
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("pretrain", help="run the deterministic pretraining loop")
    _add_common(p)
    p.add_argument("--scene-dir", help="scene directory from gen-scene "
                                       "(default: generate from --seed)")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--sweeps", type=int)
    p.add_argument("--timespan", type=float)
    p.add_argument("--w-spatial", dest="w_spatial", type=float)
    p.add_argument("--w-temporal", dest="w_temporal", type=float)
    p.add_argument("--w-cross", dest="w_cross", type=float)
    p.add_argument("--w-d2s", dest="w_d2s", type=float)
    p.add_argument("--frames", type=int)
    p.add_argument("--objects", type=int)
    p.add_argument("--cameras", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--points", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("loss-check", help="finite-difference gradient validation")
    _add_common(p)
    p.add_argument("--instances", type=int, default=100)
    p.set_defaults(func=cmd_loss_check)

    p = sub.add_parser("vote", help="temporal voting over three frames")
    _add_common(p)
    p.add_argument("--prev", required=True)
    p.add_argument("--curr", required=True)
    p.add_argument("--next", required=True)
    p.add_argument("--scores-prev", required=True)
    p.add_argument("--scores-curr", required=True)
    p.add_argument("--scores-next", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--prev-index", type=int, default=0)
    p.add_argument("--curr-index", type=int, default=1)
    p.add_argument("--next-index", type=int, default=2)
    p.add_argument("--out-scores", required=True)
    p.add_argument("--out-labels", required=True)
    p.set_defaults(func=cmd_vote)

    p = sub.add_parser("eval", help="per-class IoU and mIoU")
    _add_common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--ignore", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    level = os.environ.get("FUSIONPT_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        summary = args.func(args)
    except (ValueError, ContainerError, OSError, KeyError, IndexError) as exc:
        log.debug("command failed", exc_info=True)
        _emit({"error": {"type": type(exc).__name__, "message": str(exc)}})
        return 1
    _emit(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
