"""Joint optimization of scene parameters and trajectory control knots.

Each iteration synthesizes the blurry image from uniform exposure
samples and an event image over a randomly drawn sub-interval, scores
them against the captured measurements (weighted photometric + event
objective), backpropagates through the renderer and trajectory, and
applies two bias-corrected adaptive-moment optimizers: one over the
scene parameter groups, one over the knot twists with an exponentially
decaying learning rate.

Per-iteration randomness (the event sub-interval) is derived from
``(seed, iteration)`` alone, so training is bit-reproducible and a run
resumed from a checkpoint continues exactly where it left off.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import render as rnd
from . import se3, sensors, trajectory
from .oracle import ToyDataset
from .render import GaussianScene, RenderGrads
from .sensors import EventImage
from .trajectory import Trajectory, TrajectoryModel

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

SCENE_GROUPS = ("means", "quats", "log_scales", "opacity_logits", "color_logits")

# solver initialization: isotropic splats at a fixed fraction of the scene
# extent, mid-range opacity, identity orientation
INIT_SCALE_FRAC = 0.03
INIT_OPACITY = 0.5

# floor on the synthesized event image's L2 norm inside the training loss.
# The exact unit normalization has a 1/||E|| gradient amplification that
# diverges while the trajectory is still nearly constant (E -> 0); that
# noise would dominate both adaptive moments and stall the optimization.
EVENT_NORM_FLOOR = 0.1


@dataclass(frozen=True)
class LossWeights:
    """Weights of the photometric (alpha) and event (beta) terms."""

    alpha: float = 1.0
    beta: float = 2.0

    def __post_init__(self):
        if self.alpha < 0.0 or self.beta < 0.0 or self.alpha + self.beta <= 0.0:
            raise ValueError("loss weights must be non-negative with a positive sum")


@dataclass
class TrainConfig:
    """Training hyperparameters (defaults sized for desk-scale datasets;
    the full-scale schedule uses 30000 iterations)."""

    iterations: int = 2000
    blur_samples: int = 19
    alpha: float = 1.0
    beta: float = 2.0
    lr_means: float = 1.6e-4
    lr_quats: float = 1e-3
    lr_log_scales: float = 5e-3
    lr_opacity_logits: float = 5e-2
    lr_color_logits: float = 2.5e-3
    pose_lr_start: float = 1e-3
    pose_lr_end: float = 1e-5
    event_min_frac: float = 0.1      # minimum event window, fraction of exposure
    seed: int = 0
    traj_model: str = "bezier7"
    # two spline segments; one segment ties the three relative twists too
    # rigidly to track curved motion
    bspline_knots: int = 5
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if not (self.pose_lr_start >= self.pose_lr_end > 0.0):
            raise ValueError("need pose_lr_start >= pose_lr_end > 0")
        LossWeights(self.alpha, self.beta)

    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def photometric_loss(captured: np.ndarray, synthesized: np.ndarray) -> float:
    """Mean squared error over all pixels and channels."""
    if captured.shape != synthesized.shape:
        raise ValueError(f"photometric_loss: shape mismatch {captured.shape} vs "
                         f"{synthesized.shape}")
    return float(np.mean((captured - synthesized) ** 2))


def photometric_loss_grad(captured: np.ndarray, synthesized: np.ndarray) -> np.ndarray:
    """d loss / d synthesized."""
    return 2.0 * (synthesized - captured) / captured.size


def event_loss(captured: EventImage, synthesized: EventImage) -> float:
    """Mean squared error between two normalized event images."""
    if not (captured.normalized and synthesized.normalized):
        raise ValueError("event_loss requires normalized event images")
    if captured.values.shape != synthesized.values.shape:
        raise ValueError("event_loss: shape mismatch")
    return float(np.mean((captured.values - synthesized.values) ** 2))


def event_loss_grad(captured: EventImage, synthesized: EventImage) -> np.ndarray:
    return 2.0 * (synthesized.values - captured.values) / captured.values.size


def total_loss(weights: LossWeights, l_p: float, l_e: float) -> float:
    return weights.alpha * l_p + weights.beta * l_e


def pose_lr(iteration: int, config: TrainConfig) -> float:
    """Exponential decay from pose_lr_start to pose_lr_end over the schedule."""
    frac = iteration / config.iterations
    return config.pose_lr_start * (config.pose_lr_end / config.pose_lr_start) ** frac


# ---------------------------------------------------------------------------
# adaptive-moment state
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    """First/second moment accumulators keyed by parameter group."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    skipped: int = 0

    @staticmethod
    def for_scene(scene: GaussianScene) -> "OptimState":
        shapes = {name: getattr(scene, name).shape for name in SCENE_GROUPS}
        return OptimState(m={k: np.zeros(s) for k, s in shapes.items()},
                          v={k: np.zeros(s) for k, s in shapes.items()})

    @staticmethod
    def for_knots(n_knots: int) -> "OptimState":
        return OptimState(m={"knots": np.zeros((n_knots, 6))},
                          v={"knots": np.zeros((n_knots, 6))})

    def update(self, key: str, grad: np.ndarray, lr: float) -> np.ndarray:
        """One bias-corrected moment step; returns the parameter decrement."""
        self.m[key] = ADAM_BETA1 * self.m[key] + (1.0 - ADAM_BETA1) * grad
        self.v[key] = ADAM_BETA2 * self.v[key] + (1.0 - ADAM_BETA2) * grad * grad
        m_hat = self.m[key] / (1.0 - ADAM_BETA1**self.step)
        v_hat = self.v[key] / (1.0 - ADAM_BETA2**self.step)
        return lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class JointGrads:
    """Aggregated gradients for one iteration."""

    scene: RenderGrads
    knots: np.ndarray  # (K, 6) right-twist gradients

    def finite(self) -> bool:
        return (all(np.all(np.isfinite(a)) for a in self.scene.arrays().values())
                and bool(np.all(np.isfinite(self.knots))))


def step(scene: GaussianScene, traj: Trajectory, grads: JointGrads,
         scene_state: OptimState, pose_state: OptimState, config: TrainConfig,
         iteration: int) -> tuple[GaussianScene, Trajectory]:
    """Apply one optimization step; non-finite gradients skip the iteration."""
    if not grads.finite():
        scene_state.skipped += 1
        pose_state.skipped += 1
        return scene, traj

    scene_state.step += 1
    scene.means -= scene_state.update("means", grads.scene.d_means, config.lr_means)
    scene.quats -= scene_state.update("quats", grads.scene.d_quats, config.lr_quats)
    scene.log_scales -= scene_state.update("log_scales", grads.scene.d_log_scales,
                                           config.lr_log_scales)
    scene.opacity_logits -= scene_state.update("opacity_logits", grads.scene.d_opacity_logits,
                                               config.lr_opacity_logits)
    scene.color_logits -= scene_state.update("color_logits", grads.scene.d_color_logits,
                                             config.lr_color_logits)
    scene.quats = se3.quat_normalize(scene.quats)

    pose_state.step += 1
    delta = pose_state.update("knots", grads.knots, pose_lr(iteration, config))
    traj = trajectory.apply_knot_updates(traj, -delta)
    return scene, traj


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    scene: GaussianScene
    trajectory: Trajectory
    history: np.ndarray          # (rows, 5): iter, L_p, L_e, L_total, pose_lr
    scene_state: OptimState
    pose_state: OptimState
    event_evals: int = 0


def init_scene_from_points(points: np.ndarray, extent: float) -> GaussianScene:
    """Solver scene from an (N, 6) x y z r g b point cloud."""
    n = points.shape[0]
    colors = np.clip(points[:, 3:6], 1e-3, 1.0 - 1e-3)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianScene(
        means=points[:, :3].copy(),
        quats=quats,
        log_scales=np.full((n, 3), np.log(INIT_SCALE_FRAC * extent)),
        opacity_logits=np.full(n, float(rnd.logit(INIT_OPACITY))),
        color_logits=rnd.logit(colors),
    )


def init_trajectory(config: TrainConfig, init_pose: se3.SE3Pose,
                    exposure: tuple[float, float]) -> Trajectory:
    """All control knots start at the initial pose and separate during training."""
    model = TrajectoryModel(config.traj_model)
    return trajectory.constant(model, init_pose, exposure, n_knots=config.bspline_knots)


def _event_window(rng, exposure: tuple[float, float], min_frac: float) -> tuple[float, float]:
    ts, te = exposure
    span = te - ts
    length = rng.uniform(min_frac, 1.0)
    start = rng.uniform(0.0, 1.0 - length)
    return ts + start * span, ts + (start + length) * span

def _iteration_rng(seed: int, iteration: int):
    return np.random.default_rng(np.random.SeedSequence((seed, iteration)))


def _losses_and_grads(dataset: ToyDataset, scene: GaussianScene, traj: Trajectory,
                      config: TrainConfig, iteration: int, compute_grads: bool):
    """One iteration's forward (and optionally backward) pass."""
    weights = config.weights()
    cam = dataset.camera
    background = dataset.background_rgb()
    rng = _iteration_rng(config.seed, iteration)

    blur_hat, (blur_times, blur_tapes) = sensors.synth_blur_with_tapes(
        scene, traj, cam, config.blur_samples, background=background)
    l_p = photometric_loss(dataset.blurry, blur_hat)

    l_e = 0.0
    event_aux = None
    used_event = False
    if weights.beta > 0.0:
        t_i, t_j = _event_window(rng, traj.exposure, config.event_min_frac)
        e_obs = sensors.normalize_event_image(
            sensors.accumulate_events(dataset.events, t_i, t_j))
        e_hat_raw, (tape_i, tape_j, gray_i, gray_j) = sensors.synth_event_image_with_tapes(
            scene, traj, t_i, t_j, cam, background=background)
        e_hat = sensors.normalize_event_image(e_hat_raw, floor=EVENT_NORM_FLOOR)
        l_e = event_loss(e_obs, e_hat)
        event_aux = (t_i, t_j, e_obs, e_hat_raw, e_hat, tape_i, tape_j, gray_i, gray_j)
        used_event = True

    l_total = total_loss(weights, l_p, l_e)
    if not compute_grads:
        return l_p, l_e, l_total, None, used_event

    scene_grads = RenderGrads.zeros(len(scene))
    times = list(blur_times)
    pose_grads = []

    d_blur = weights.alpha * photometric_loss_grad(dataset.blurry, blur_hat)
    per_sample = d_blur / len(blur_tapes)
    for tape in blur_tapes:
        g = rnd.backward(tape, per_sample)
        pose_grads.append(g.pose_twist.copy())
        scene_grads += g

    if event_aux is not None:
        t_i, t_j, e_obs, e_hat_raw, e_hat, tape_i, tape_j, gray_i, gray_j = event_aux
        norm = float(np.linalg.norm(e_hat_raw.values))
        g_n = weights.beta * event_loss_grad(e_obs, e_hat)
        if norm >= EVENT_NORM_FLOOR:
            n_hat = e_hat.values
            d_e = (g_n - np.sum(g_n * n_hat) * n_hat) / norm
        else:
            # below the floor the divisor is constant, so no projection term
            d_e = g_n / EVENT_NORM_FLOOR
        d_gray_j = d_e / (gray_j + sensors.EPS_LOG)
        d_gray_i = -d_e / (gray_i + sensors.EPS_LOG)
        for tape, d_gray, t in ((tape_i, d_gray_i, t_i), (tape_j, d_gray_j, t_j)):
            g = rnd.backward(tape, d_gray[:, :, None] * rnd.GRAY_WEIGHTS)
            pose_grads.append(g.pose_twist.copy())
            scene_grads += g
            times.append(t)

    # chain pose gradients to the knots: a left twist on the world-to-camera
    # view equals the negated right twist on the camera-to-world pose
    jac = trajectory.knot_jacobian(traj, np.asarray(times))
    g_right = -np.stack(pose_grads)
    knot_grads = np.einsum("skdj,sj->kd", jac, g_right)

    return l_p, l_e, l_total, JointGrads(scene=scene_grads, knots=knot_grads), used_event


def train(dataset: ToyDataset, config: TrainConfig, checkpoint_dir=None,
          resume: "Checkpoint | None" = None, stop_at: int | None = None) -> TrainResult:
    """Run the joint optimization; returns the recovered scene/trajectory
    plus one loss row per iteration and a final row after the last step.

    ``config.iterations`` fixes the schedule (the pose learning-rate
    decay); ``stop_at`` pauses the run earlier so it can be resumed from
    a checkpoint and still reproduce an uninterrupted run bit for bit.
    """
    for name in ("blurry", "events", "camera", "init_pose", "init_points"):
        if getattr(dataset, name, None) is None:
            raise ValueError(f"train: dataset is missing '{name}'")
    stop = config.iterations if stop_at is None else min(stop_at, config.iterations)

    if resume is not None:
        scene, traj = resume.scene, resume.trajectory
        scene_state, pose_state = resume.scene_state, resume.pose_state
        start = resume.iteration
        event_evals = resume.event_evals
    else:
        scene = init_scene_from_points(dataset.init_points, dataset.extent)
        traj = init_trajectory(config, dataset.init_pose, dataset.trajectory_gt.exposure)
        scene_state = OptimState.for_scene(scene)
        pose_state = OptimState.for_knots(len(traj.knots))
        start = 0
        event_evals = 0

    rows = []
    for it in range(start, stop):
        l_p, l_e, l_total, grads, used_event = _losses_and_grads(
            dataset, scene, traj, config, it, compute_grads=True)
        event_evals += int(used_event)
        rows.append((it, l_p, l_e, l_total, pose_lr(it, config)))
        scene, traj = step(scene, traj, grads, scene_state, pose_state, config, it)
        if checkpoint_dir is not None and (it + 1) % config.checkpoint_every == 0:
            save_checkpoint(checkpoint_dir, Checkpoint(scene, traj, scene_state,
                                                       pose_state, it + 1, event_evals))

    l_p, l_e, l_total, _, used_event = _losses_and_grads(
        dataset, scene, traj, config, stop, compute_grads=False)
    event_evals += int(used_event)
    rows.append((stop, l_p, l_e, l_total, pose_lr(stop, config)))

    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir, Checkpoint(scene, traj, scene_state, pose_state,
                                                   stop, event_evals))
    return TrainResult(scene=scene, trajectory=traj, history=np.array(rows),
                       scene_state=scene_state, pose_state=pose_state,
                       event_evals=event_evals)


# ---------------------------------------------------------------------------
# checkpoints: scene + trajectory text records, moments as npz
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    scene: GaussianScene
    trajectory: Trajectory
    scene_state: OptimState
    pose_state: OptimState
    iteration: int
    event_evals: int = 0


def save_checkpoint(ckpt_dir, ckpt: Checkpoint) -> None:
    os.makedirs(ckpt_dir, exist_ok=True)
    rnd.save_scene(os.path.join(ckpt_dir, "scene.txt"), ckpt.scene)
    trajectory.save(os.path.join(ckpt_dir, "trajectory.txt"), ckpt.trajectory)
    arrays = {"iteration": np.array(ckpt.iteration),
              "event_evals": np.array(ckpt.event_evals),
              "scene_step": np.array(ckpt.scene_state.step),
              "scene_skipped": np.array(ckpt.scene_state.skipped),
              "pose_step": np.array(ckpt.pose_state.step),
              "pose_skipped": np.array(ckpt.pose_state.skipped)}
    for key, arr in ckpt.scene_state.m.items():
        arrays[f"scene_m_{key}"] = arr
        arrays[f"scene_v_{key}"] = ckpt.scene_state.v[key]
    arrays["pose_m_knots"] = ckpt.pose_state.m["knots"]
    arrays["pose_v_knots"] = ckpt.pose_state.v["knots"]
    np.savez(os.path.join(ckpt_dir, "optim.npz"), **arrays)


def load_checkpoint(ckpt_dir) -> Checkpoint:
    scene = rnd.load_scene(os.path.join(ckpt_dir, "scene.txt"))
    traj = trajectory.load(os.path.join(ckpt_dir, "trajectory.txt"))
    with np.load(os.path.join(ckpt_dir, "optim.npz")) as data:
        scene_state = OptimState(
            m={k: data[f"scene_m_{k}"].copy() for k in SCENE_GROUPS},
            v={k: data[f"scene_v_{k}"].copy() for k in SCENE_GROUPS},
            step=int(data["scene_step"]), skipped=int(data["scene_skipped"]))
        pose_state = OptimState(
            m={"knots": data["pose_m_knots"].copy()},
            v={"knots": data["pose_v_knots"].copy()},
            step=int(data["pose_step"]), skipped=int(data["pose_skipped"]))
        iteration = int(data["iteration"])
        event_evals = int(data["event_evals"])
    return Checkpoint(scene, traj, scene_state, pose_state, iteration, event_evals)


def has_checkpoint(ckpt_dir) -> bool:
    return all(os.path.exists(os.path.join(ckpt_dir, name))
               for name in ("scene.txt", "trajectory.txt", "optim.npz"))
