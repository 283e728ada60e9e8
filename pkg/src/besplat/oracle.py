"""Ground-truth toy dataset generator.

Builds a random Gaussian scene in a box, a smooth random camera motion
over the exposure, the blurry observation (mean of sharp renders), an
event stream extracted from a dense sequence of rendered frames by
per-pixel contrast-threshold crossings, sharp reference frames, and the
perturbed initial pose / noisy point cloud handed to the solver.

Every quantity is a pure function of the dataset seed, so regenerating
with the same configuration is byte-identical.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import images, render as rnd, se3, sensors, trajectory
from .render import Camera, GaussianScene
from .se3 import SE3Pose, Twist
from .sensors import EventStream
from .trajectory import Trajectory, TrajectoryModel

# camera distance from the scene center, in units of scene extent
CAMERA_DISTANCE = 2.2
# fraction of the image half-width the scene box projects to
CAMERA_FILL = 0.65


@dataclass
class SynthConfig:
    """Flat configuration mirrored by the synth config file."""

    seed: int = 0
    n_gaussians: int = 50
    extent: float = 1.0
    width: int = 64
    height: int = 64
    exposure_start: float = 0.0
    exposure_end: float = 0.1
    rot_deg: float = 5.0            # ground-truth motion magnitude
    trans_frac: float = 0.05        # translation bound as fraction of extent
    traj_model: str = "bezier7"
    threshold: float = 0.1
    esim_steps: int = 200
    n_sharp: int = 5
    blur_samples: int = 19
    init_rot_deg: float = 2.0       # solver initial-pose perturbation
    init_trans_frac: float = 0.02
    init_noise_frac: float = 0.02   # point-cloud noise as fraction of extent
    background: float = 0.05        # dim ambient backdrop; a pure black
                                    # background makes the event log-difference
                                    # degenerate on empty pixels

    @property
    def exposure(self) -> tuple[float, float]:
        return (self.exposure_start, self.exposure_end)


@dataclass
class ToyDataset:
    """One self-consistent ground-truth problem instance."""

    camera: Camera
    trajectory_gt: Trajectory
    blurry: np.ndarray
    events: EventStream
    sharp_frames: list[np.ndarray]
    sharp_times: np.ndarray
    init_pose: SE3Pose
    init_points: np.ndarray         # (N, 6) rows of x y z r g b
    extent: float
    seed: int
    background: float = 0.0
    scene_gt: GaussianScene | None = None
    meta: dict = field(default_factory=dict)

    def background_rgb(self) -> tuple[float, float, float]:
        return (self.background, self.background, self.background)


def _subseed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence((seed, tag)).generate_state(1)[0])


def make_toy_scene(seed: int, n_gaussians: int, extent: float) -> GaussianScene:
    """Random splats in a centered box: opacities in [0.3, 0.95], scales
    in [1%, 10%] of extent, colors away from the sigmoid saturation."""
    if n_gaussians < 1:
        raise ValueError("scene needs at least one gaussian")
    rng = np.random.default_rng(seed)
    means = rng.uniform(-extent / 2.0, extent / 2.0, size=(n_gaussians, 3))
    quats = se3.quat_normalize(rng.normal(size=(n_gaussians, 4)))
    scales = rng.uniform(0.01, 0.10, size=(n_gaussians, 3)) * extent
    opacities = rng.uniform(0.3, 0.95, size=n_gaussians)
    colors = rng.uniform(0.1, 0.9, size=(n_gaussians, 3))
    return GaussianScene(means=means, quats=quats, log_scales=np.log(scales),
                         opacity_logits=rnd.logit(opacities),
                         color_logits=rnd.logit(colors))


def make_camera(width: int, height: int, extent: float) -> tuple[Camera, SE3Pose]:
    """Intrinsics plus the base camera-to-world pose looking at the origin."""
    dist = CAMERA_DISTANCE * extent
    f = CAMERA_FILL * (min(width, height) - 1) * (dist - extent / 2.0) / extent
    cam = Camera(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                 width=width, height=height)
    # world-to-camera is (I, [0, 0, dist]); the trajectory holds its inverse
    base = se3.inverse(SE3Pose(translation=[0.0, 0.0, dist]))
    return cam, base


def _unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _unit_orthogonal(rng, axis: np.ndarray) -> np.ndarray:
    v = _unit(rng)
    v -= axis * (v @ axis)
    return v / np.linalg.norm(v)


def make_gt_trajectory(seed: int, model: TrajectoryModel, rot_max: float, trans_max: float,
                       base_pose: SE3Pose, exposure: tuple[float, float],
                       n_knots: int = 4) -> Trajectory:
    """Smooth random motion whose knot deltas from the first knot stay
    within ``rot_max`` radians / ``trans_max`` scene units.

    The path is a main sweep plus a coherent transverse arc (half a sine
    period, zero at the endpoints) and a little per-knot jitter.  The
    arc keeps the curve genuinely bent: independent per-knot wiggle
    would be averaged away by the spline's smoothing and leave a nearly
    straight path that a 2-knot model could fit.
    """
    rng = np.random.default_rng(seed)
    if model is TrajectoryModel.LINEAR:
        k = 2
    elif model is TrajectoryModel.BEZIER7:
        k = 8
    else:
        k = n_knots
    rho_dir, phi_dir = _unit(rng), _unit(rng)
    main = np.concatenate([rho_dir * trans_max, phi_dir * rot_max])
    arc = np.concatenate([_unit_orthogonal(rng, rho_dir) * trans_max,
                          _unit_orthogonal(rng, phi_dir) * rot_max])
    s = np.linspace(0.0, 1.0, k)
    twists = s[:, None] * main[None, :]
    twists += 0.5 * np.sin(np.pi * s)[:, None] * arc[None, :]
    for i in range(1, k - 1):
        bump = 0.1 * np.sin(np.pi * s[i])
        twists[i] += np.concatenate([_unit(rng) * trans_max, _unit(rng) * rot_max]) * bump
    over = 1.0
    if rot_max > 0.0:
        over = max(over, np.max(np.linalg.norm(twists[:, 3:], axis=1)) / rot_max)
    if trans_max > 0.0:
        over = max(over, np.max(np.linalg.norm(twists[:, :3], axis=1)) / trans_max)
    twists /= over
    knots = [se3.compose(base_pose, se3.exp(Twist.from_vector(tw))) for tw in twists]
    dt = (exposure[1] - exposure[0]) / (k - 3) if model is TrajectoryModel.CUBIC_BSPLINE else None
    return Trajectory(model, knots, exposure, t0=exposure[0], dt=dt)


def perturb_init(gt_pose: SE3Pose, seed: int, rot_deg: float, trans_frac: float,
                 extent: float = 1.0) -> SE3Pose:
    """gt_pose composed with a random twist of exactly the given magnitudes."""
    rng = np.random.default_rng(seed)
    rho = _unit(rng) * trans_frac * extent
    phi = _unit(rng) * np.deg2rad(rot_deg)
    if rot_deg == 0.0:
        phi = np.zeros(3)
    if trans_frac == 0.0:
        rho = np.zeros(3)
    return se3.compose(gt_pose, se3.exp(Twist(rho, phi)))


def events_from_log_frames(log_frames: np.ndarray, times: np.ndarray, threshold: float,
                           width: int, height: int) -> EventStream:
    """Contrast-threshold crossing extraction from dense log-intensity frames.

    Walks a per-pixel reference: each full crossing of ``threshold``
    emits one event, timestamped by linear interpolation between the
    bracketing frame times, and advances the reference by the emitted
    multiple of the threshold.  Timestamps are quantized to nanoseconds
    (the event-file resolution) and kept strictly after ``times[0]``.
    """
    log_frames = np.asarray(log_frames, dtype=np.float64).reshape(len(times), -1)
    t_start = times[0]
    chunks_x, chunks_y, chunks_t, chunks_p = [], [], [], []
    ref = log_frames[0].copy()
    for k in range(1, len(times)):
        log_now = log_frames[k]
        prev_log = log_frames[k - 1]
        diff = log_now - ref
        count = np.floor(np.abs(diff) / threshold).astype(np.int64)
        pol = np.sign(diff).astype(np.int64)
        hot = np.flatnonzero(count > 0)
        if hot.size:
            counts = count[hot]
            rep = np.repeat(hot, counts)
            cum = np.concatenate([[0], np.cumsum(counts)[:-1]])
            m = np.arange(rep.size) - np.repeat(cum, counts) + 1
            levels = ref[rep] + m * threshold * pol[rep]
            denom = log_now[rep] - prev_log[rep]
            frac = np.clip((levels - prev_log[rep]) / denom, 0.0, 1.0)
            stamps = times[k - 1] + frac * (times[k] - times[k - 1])
            stamps = np.round(np.maximum(stamps, t_start + 1e-9), 9)
            order = np.argsort(stamps, kind="stable")
            chunks_x.append(rep[order] % width)
            chunks_y.append(rep[order] // width)
            chunks_t.append(stamps[order])
            chunks_p.append(pol[rep][order])
            ref[hot] += threshold * counts * pol[hot]

    if chunks_t:
        x = np.concatenate(chunks_x)
        y = np.concatenate(chunks_y)
        tt = np.concatenate(chunks_t)
        p = np.concatenate(chunks_p)
        order = np.argsort(tt, kind="stable")
        x, y, tt, p = x[order], y[order], tt[order], p[order]
    else:
        x = y = p = np.zeros(0, dtype=np.int64)
        tt = np.zeros(0)
    return EventStream(x=x, y=y, t=tt, p=p, threshold=threshold,
                       width=width, height=height)


def generate_event_stream(scene, traj: Trajectory, cam: Camera, threshold: float,
                          n_steps: int, background=(0.0, 0.0, 0.0)) -> EventStream:
    """Frame-differencing event synthesis from ``n_steps`` rendered frames."""
    if n_steps < 2:
        raise ValueError("event synthesis needs at least 2 frames")
    times = np.linspace(traj.exposure[0], traj.exposure[1], n_steps)
    q, t = trajectory.eval_pose_batch(traj, times)
    log_frames = np.empty((n_steps, cam.width * cam.height))
    for k in range(n_steps):
        view = se3.inverse(SE3Pose(q[k], t[k]))
        gray = rnd.render_gray(scene, view, cam, background).reshape(-1)
        log_frames[k] = np.log(gray + sensors.EPS_LOG)
    return events_from_log_frames(log_frames, times, threshold, cam.width, cam.height)


def sharp_reference_times(exposure: tuple[float, float], n_sharp: int) -> np.ndarray:
    return np.linspace(exposure[0], exposure[1], n_sharp)


def generate_dataset(config: SynthConfig, out_dir=None) -> ToyDataset:
    """Build one toy dataset; when ``out_dir`` is given, persist it there."""
    model = TrajectoryModel(config.traj_model)
    bg = (config.background,) * 3
    scene = make_toy_scene(_subseed(config.seed, 0), config.n_gaussians, config.extent)
    cam, base = make_camera(config.width, config.height, config.extent)
    traj = make_gt_trajectory(_subseed(config.seed, 1), model,
                              np.deg2rad(config.rot_deg),
                              config.trans_frac * config.extent,
                              base, config.exposure)
    blurry = sensors.synth_blur(scene, traj, cam, config.blur_samples, background=bg)
    events = generate_event_stream(scene, traj, cam, config.threshold, config.esim_steps,
                                   background=bg)

    sharp_times = sharp_reference_times(config.exposure, config.n_sharp)
    sq, st = trajectory.eval_pose_batch(traj, sharp_times)
    sharp_frames = [
        rnd.render(scene, se3.inverse(SE3Pose(sq[i], st[i])), cam, bg)
        for i in range(config.n_sharp)
    ]

    mid = trajectory.eval_pose(traj, 0.5 * (config.exposure_start + config.exposure_end))
    init_pose = perturb_init(mid, _subseed(config.seed, 2), config.init_rot_deg,
                             config.init_trans_frac, config.extent)

    rng = np.random.default_rng(_subseed(config.seed, 3))
    noisy_means = scene.means + rng.normal(size=scene.means.shape) * (
        config.init_noise_frac * config.extent)
    noisy_colors = np.clip(scene.colors() + 0.05 * rng.normal(size=(len(scene), 3)),
                           0.02, 0.98)
    init_points = np.concatenate([noisy_means, noisy_colors], axis=1)

    meta = {
        "seed": config.seed,
        "exposure_start": config.exposure_start,
        "exposure_end": config.exposure_end,
        "threshold": config.threshold,
        "esim_steps": config.esim_steps,
        "extent": config.extent,
        "n_sharp": config.n_sharp,
        "n_gaussians": config.n_gaussians,
        "blur_samples": config.blur_samples,
        "traj_model": config.traj_model,
        "background": config.background,
    }
    dataset = ToyDataset(camera=cam, trajectory_gt=traj, blurry=blurry, events=events,
                         sharp_frames=sharp_frames, sharp_times=sharp_times,
                         init_pose=init_pose, init_points=init_points,
                         extent=config.extent, seed=config.seed,
                         background=config.background, scene_gt=scene, meta=meta)
    if out_dir is not None:
        save_dataset(out_dir, dataset)
    return dataset


# ---------------------------------------------------------------------------
# dataset directory layout
# ---------------------------------------------------------------------------

def _pose_line(pose: SE3Pose) -> str:
    vals = np.concatenate([pose.rotation, pose.translation])
    return " ".join(f"{v:.17g}" for v in vals)


def save_dataset(out_dir, ds: ToyDataset) -> None:
    os.makedirs(out_dir, exist_ok=True)
    join = lambda name: os.path.join(out_dir, name)
    images.write_pfm(join("blurry.pfm"), ds.blurry)
    images.write_png(join("blurry.png"), ds.blurry)
    sensors.write_events(join("events.txt"), ds.events)
    cam = ds.camera
    with open(join("camera.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"{cam.fx:.17g} {cam.fy:.17g} {cam.cx:.17g} {cam.cy:.17g} "
                 f"{cam.width} {cam.height}\n")
    trajectory.save(join("traj_gt.txt"), ds.trajectory_gt)
    for i, frame in enumerate(ds.sharp_frames):
        images.write_pfm(join(f"sharp_{i:03d}.pfm"), frame)
    with open(join("init_pose.txt"), "w", encoding="utf-8") as fh:
        fh.write(_pose_line(ds.init_pose) + "\n")
    with open(join("init_points.txt"), "w", encoding="utf-8") as fh:
        for row in ds.init_points:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
    with open(join("meta.txt"), "w", encoding="utf-8") as fh:
        for key, val in ds.meta.items():
            fh.write(f"{key} = {val}\n")


def _parse_meta(path) -> dict:
    meta = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            meta[key.strip()] = val.strip()
    return meta


def load_dataset(data_dir) -> ToyDataset:
    """Read a persisted dataset; raises if any component is missing."""
    join = lambda name: os.path.join(data_dir, name)
    for required in ("blurry.pfm", "events.txt", "camera.txt", "traj_gt.txt",
                     "init_pose.txt", "init_points.txt", "meta.txt"):
        if not os.path.exists(join(required)):
            raise FileNotFoundError(f"dataset at {data_dir} is missing {required}")
    meta = _parse_meta(join("meta.txt"))
    with open(join("camera.txt"), "r", encoding="utf-8") as fh:
        vals = fh.read().split()
    cam = Camera(fx=float(vals[0]), fy=float(vals[1]), cx=float(vals[2]),
                 cy=float(vals[3]), width=int(vals[4]), height=int(vals[5]))
    traj = trajectory.load(join("traj_gt.txt"))
    blurry = images.read_pfm(join("blurry.pfm")).astype(np.float64)
    events = sensors.read_events(join("events.txt"))
    n_sharp = int(meta["n_sharp"])
    frames = [images.read_pfm(join(f"sharp_{i:03d}.pfm")).astype(np.float64)
              for i in range(n_sharp)]
    with open(join("init_pose.txt"), "r", encoding="utf-8") as fh:
        vals = np.array([float(v) for v in fh.read().split()])
    init_pose = SE3Pose(vals[:4], vals[4:])
    init_points = np.loadtxt(join("init_points.txt"), ndmin=2)
    exposure = (float(meta["exposure_start"]), float(meta["exposure_end"]))
    return ToyDataset(camera=cam, trajectory_gt=traj, blurry=blurry, events=events,
                      sharp_frames=frames,
                      sharp_times=sharp_reference_times(exposure, n_sharp),
                      init_pose=init_pose, init_points=init_points,
                      extent=float(meta["extent"]), seed=int(meta["seed"]),
                      background=float(meta.get("background", 0.0)),
                      scene_gt=None, meta=meta)
