"""Command-line surface: synth -> train -> render -> eval.

Exit codes: 0 success, 2 usage/configuration error, 1 internal error.
``BESPLAT_THREADS`` caps the numerical thread-pool width (0 = auto).

Config files are flat ``key = value`` text mirroring the SynthConfig /
TrainConfig fields; ``#`` starts a comment.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import images, metrics, optim, oracle, render as rnd, se3, trajectory
from .optim import TrainConfig
from .oracle import SynthConfig


class UsageError(Exception):
    """Configuration or input problem attributable to the caller."""


def _apply_thread_cap() -> None:
    cap = os.environ.get("BESPLAT_THREADS", "")
    if not cap or cap == "0":
        return
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(int(cap))
    except (ImportError, ValueError):
        pass


def load_config(path, cls):
    """Parse flat key = value text into a config dataclass."""
    defaults = cls()
    values = {}
    known = {f.name: getattr(defaults, f.name) for f in dataclasses.fields(cls)}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key, val = key.strip(), val.strip().strip('"')
            if not sep or not key or not val:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            if key not in known:
                raise UsageError(f"{path}:{lineno}: unknown config key '{key}'")
            kind = type(known[key])
            try:
                values[key] = kind(val) if kind is not int else int(val, 0)
            except ValueError as err:
                raise UsageError(f"{path}:{lineno}: bad value for '{key}': {err}") from err
    try:
        return dataclasses.replace(defaults, **values)
    except ValueError as err:
        raise UsageError(f"{path}: {err}") from err


def _write_loss_csv(path, rows: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iter,L_p,L_e,L_total,pose_lr\n")
        for row in rows:
            fh.write(f"{int(row[0])},{row[1]:.17g},{row[2]:.17g},{row[3]:.17g},{row[4]:.17g}\n")


def _read_loss_csv(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data


def cmd_synth(args) -> int:
    config = load_config(args.config, SynthConfig) if args.config else SynthConfig()
    dataset = oracle.generate_dataset(config, args.out)
    print(f"dataset written to {args.out}")
    print(f"seed = {config.seed}")
    print(f"gaussians = {config.n_gaussians}")
    print(f"resolution = {config.width}x{config.height}")
    print(f"events = {len(dataset.events)}")
    print(f"exposure = [{config.exposure_start}, {config.exposure_end}]")
    return 0


def cmd_train(args) -> int:
    dataset = oracle.load_dataset(args.data)
    config = load_config(args.config, TrainConfig) if args.config else TrainConfig()
    os.makedirs(args.out, exist_ok=True)
    ckpt_dir = os.path.join(args.out, "checkpoint")
    loss_path = os.path.join(args.out, "loss.csv")

    resume = None
    old_rows = None
    if optim.has_checkpoint(ckpt_dir):
        resume = optim.load_checkpoint(ckpt_dir)
        if resume.iteration >= config.iterations and args.stop_at is None:
            print(f"checkpoint already at iteration {resume.iteration}; nothing to do")
            return 0
        if os.path.exists(loss_path):
            rows = _read_loss_csv(loss_path)
            old_rows = rows[rows[:, 0] < resume.iteration]

    result = optim.train(dataset, config, checkpoint_dir=ckpt_dir, resume=resume,
                         stop_at=args.stop_at)
    with open(os.path.join(ckpt_dir, "camera.txt"), "w", encoding="utf-8") as fh:
        cam = dataset.camera
        fh.write(f"{cam.fx:.17g} {cam.fy:.17g} {cam.cx:.17g} {cam.cy:.17g} "
                 f"{cam.width} {cam.height} {dataset.background:.17g}\n")
    rows = result.history if old_rows is None else np.vstack([old_rows, result.history])
    _write_loss_csv(loss_path, rows)
    print(f"trained to iteration {int(result.history[-1, 0])}")
    print(f"L_total initial = {rows[0, 3]:.6g}")
    print(f"L_total final = {rows[-1, 3]:.6g}")
    print(f"skipped_steps = {result.scene_state.skipped}")
    print(f"loss log: {loss_path}")
    return 0


def _load_checkpoint_scene(ckpt_dir):
    scene_path = os.path.join(ckpt_dir, "scene.txt")
    traj_path = os.path.join(ckpt_dir, "trajectory.txt")
    cam_path = os.path.join(ckpt_dir, "camera.txt")
    for path in (scene_path, traj_path, cam_path):
        if not os.path.exists(path):
            raise UsageError(f"checkpoint at {ckpt_dir} is missing {os.path.basename(path)}")
    scene = rnd.load_scene(scene_path)
    traj = trajectory.load(traj_path)
    with open(cam_path, "r", encoding="utf-8") as fh:
        vals = fh.read().split()
    cam = rnd.Camera(fx=float(vals[0]), fy=float(vals[1]), cx=float(vals[2]),
                     cy=float(vals[3]), width=int(vals[4]), height=int(vals[5]))
    background = float(vals[6]) if len(vals) > 6 else 0.0
    return scene, traj, cam, (background,) * 3


def cmd_render(args) -> int:
    scene, traj, cam, background = _load_checkpoint_scene(args.ckpt)
    ts, te = traj.exposure
    if args.time == "sweep":
        fractions = np.linspace(0.0, 1.0, args.frames)
    else:
        try:
            frac = float(args.time)
        except ValueError as err:
            raise UsageError(f"--time must be a number in [0, 1] or 'sweep'") from err
        if not 0.0 <= frac <= 1.0:
            raise UsageError(f"--time {frac} outside [0, 1]")
        fractions = np.array([frac])
    os.makedirs(args.out, exist_ok=True)
    for i, frac in enumerate(fractions):
        pose = trajectory.eval_pose(traj, ts + frac * (te - ts))
        img = rnd.render(scene, se3.inverse(pose), cam, background)
        stem = os.path.join(args.out, f"frame_{i:03d}")
        images.write_pfm(stem + ".pfm", img)
        images.write_png(stem + ".png", img)
        print(f"frame_{i:03d} t = {frac:.6g}")
    print(f"{len(fractions)} frame(s) written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    scene, traj, cam, _ = _load_checkpoint_scene(args.ckpt)
    dataset = oracle.load_dataset(args.data)
    if not dataset.sharp_frames:
        raise UsageError(f"dataset at {args.data} has no sharp reference frames")
    background = dataset.background_rgb()
    q, t = trajectory.eval_pose_batch(traj, dataset.sharp_times)
    psnrs, ssims, blur_psnrs = [], [], []
    for i, ref in enumerate(dataset.sharp_frames):
        img = rnd.render(scene, se3.inverse(se3.SE3Pose(q[i], t[i])), cam, background)
        psnrs.append(metrics.psnr(ref, img))
        ssims.append(metrics.ssim(ref, img))
        blur_psnrs.append(metrics.psnr(ref, dataset.blurry))
    rot_rmse, trans_rmse = metrics.trajectory_errors(traj, dataset.trajectory_gt)

    print(f"frames = {len(psnrs)}")
    for i, (p, s) in enumerate(zip(psnrs, ssims)):
        print(f"psnr_{i:03d} = {p:.6g}")
        print(f"ssim_{i:03d} = {s:.6g}")
    print(f"psnr_mean = {np.mean(psnrs):.6g}")
    print(f"ssim_mean = {np.mean(ssims):.6g}")
    print(f"blur_psnr_mean = {np.mean(blur_psnrs):.6g}")
    print(f"rot_rmse_deg = {rot_rmse:.6g}")
    print(f"trans_rmse = {trans_rmse:.6g}")
    print(f"trans_rmse_frac = {trans_rmse / dataset.extent:.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="besplat",
        description="Sharp Gaussian-splat scene and camera-motion recovery "
                    "from one blurry image plus its event stream.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a ground-truth toy dataset")
    p.add_argument("--config", help="flat key = value synth config")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="jointly optimize scene and trajectory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="flat key = value train config")
    p.add_argument("--out", required=True, help="output directory (checkpoint + loss.csv)")
    p.add_argument("--stop-at", type=int, default=None,
                   help="pause after this iteration (resume by re-running)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render sharp frames from a checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--time", required=True, help="normalized time in [0, 1] or 'sweep'")
    p.add_argument("--frames", type=int, default=5, help="frame count for sweep")
    p.add_argument("--out", required=True, help="output image directory")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="evaluate a checkpoint against references")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory with references")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _apply_thread_cap()
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
