"""Reconstruction quality metrics and trajectory error evaluation."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import se3, trajectory
from .se3 import SE3Pose
from .trajectory import Trajectory

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE), capped at 100 dB for (near-)identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


def _gaussian_window() -> np.ndarray:
    half = SSIM_WINDOW // 2
    g = np.exp(-((np.arange(SSIM_WINDOW) - half) ** 2) / (2.0 * SSIM_SIGMA**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable valid-region correlation with a 1D window."""
    tmp = sliding_window_view(img, win.size, axis=0) @ win
    return sliding_window_view(tmp, win.size, axis=1) @ win


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Windowed structural similarity, per channel then averaged.

    11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03; the map is
    averaged over the valid (fully covered) region.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"ssim: image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = _gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    vals = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mu_x = _filter_valid(x, win)
        mu_y = _filter_valid(y, win)
        var_x = _filter_valid(x * x, win) - mu_x**2
        var_y = _filter_valid(y * y, win) - mu_y**2
        cov = _filter_valid(x * y, win) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# trajectory evaluation
# ---------------------------------------------------------------------------

def align_pose_sets(est_q: np.ndarray, est_t: np.ndarray,
                    gt_q: np.ndarray, gt_t: np.ndarray) -> SE3Pose:
    """Global transform G minimizing the least-squares (chordal) distance
    between {G . est_i} and {gt_i}: rotation by SVD, then mean translation."""
    r_est = se3.quat_to_matrix(est_q)
    r_gt = se3.quat_to_matrix(gt_q)
    acc = np.einsum("nij,nkj->ik", r_gt, r_est)
    u, _, vt = np.linalg.svd(acc)
    d = np.sign(np.linalg.det(u @ vt))
    g_rot = u @ np.diag([1.0, 1.0, d]) @ vt
    g_t = np.mean(gt_t - est_t @ g_rot.T, axis=0)
    return SE3Pose(se3.quat_from_matrix(g_rot), g_t)


def trajectory_errors(traj_est: Trajectory, traj_gt: Trajectory,
                      n_samples: int = 100) -> tuple[float, float]:
    """(rotation RMSE in degrees, translation RMSE in scene units) between
    two trajectories after a single global SE(3) alignment.

    A single blurry view fixes the gauge only up to a global transform,
    so the recovered trajectory is aligned to ground truth first; scale
    is already pinned by the known initial point cloud.
    """
    times = trajectory.exposure_times(traj_gt, n_samples)
    eq, et = trajectory.eval_pose_batch(traj_est, times)
    gq, gt_t = trajectory.eval_pose_batch(traj_gt, times)
    g = align_pose_sets(eq, et, gq, gt_t)
    aq = se3.quat_multiply(np.broadcast_to(g.rotation, eq.shape), eq)
    at = et @ se3.quat_to_matrix(g.rotation).T + g.translation
    rel = se3.quat_multiply(se3.quat_conjugate(aq), gq)
    rot_err = se3.rotation_angle(rel)
    trans_err = np.linalg.norm(at - gt_t, axis=-1)
    return (float(np.degrees(np.sqrt(np.mean(rot_err**2)))),
            float(np.sqrt(np.mean(trans_err**2))))
