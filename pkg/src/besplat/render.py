"""Differentiable Gaussian-splat rasterizer.

Forward: project anisotropic 3D Gaussians to the image plane, sort by
depth, alpha-composite front to back.  The forward pass keeps a
per-pixel compositing record (:class:`RenderTape`) so the backward pass
can produce exact analytic gradients for every Gaussian parameter, plus
a camera-pose twist gradient that flows only through the transformed
Gaussian centers (the 2D covariances are held fixed at the evaluation
pose; their pose sensitivity is negligible and dropped).

Conventions:

* the ``pose`` argument is the world-to-camera transform,
* pixel (ix, iy) has its center at image coordinates (ix, iy),
* the pose twist gradient is reported for left-multiplicative
  perturbations ``exp(eps) . pose``, twist order [rho, phi],
* opacity is stored as a pre-sigmoid logit, scale as log-scale and
  color as a per-channel logit, so unconstrained optimization keeps all
  activations inside their valid ranges.

Compositing cutoffs (contributions with alpha below ``alpha_cutoff``
skipped; compositing stops once transmittance drops below
``trans_stop``; influence limited to a 3-sigma bounding box) make the
forward pass only piecewise smooth.  ``exact=True`` disables all three,
which is what finite-difference gradient checks run against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import se3
from .se3 import SE3Pose

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])

DEFAULT_NEAR = 0.01
DEFAULT_ALPHA_CUTOFF = 1.0 / 255.0
DEFAULT_TRANS_STOP = 1e-4
ALPHA_MAX = 0.999          # keeps log-transmittance finite
COV2D_REG = 0.3            # pixel^2 added to the 2D covariance diagonal
WINDOW_SIGMAS = 3.0


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def logit(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics (zero skew) plus image size in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise ValueError("camera focal lengths must be positive")
        if not (0.0 <= self.cx <= self.width - 1 and 0.0 <= self.cy <= self.height - 1):
            raise ValueError("camera principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass
class Gaussian:
    """One splat primitive, stored in optimization parameterization."""

    mu: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    color_logit: np.ndarray

    @staticmethod
    def from_activated(mu, quat, scale, opacity, color) -> "Gaussian":
        scale = np.asarray(scale, dtype=np.float64)
        if np.any(scale <= 0.0):
            raise ValueError("gaussian scale must be strictly positive")
        opacity = float(np.clip(opacity, 1e-6, 1.0 - 1e-6))
        color = np.clip(np.asarray(color, dtype=np.float64), 1e-6, 1.0 - 1e-6)
        return Gaussian(
            mu=np.asarray(mu, dtype=np.float64).reshape(3),
            quat=se3.quat_normalize(np.asarray(quat, dtype=np.float64).reshape(4)),
            log_scale=np.log(scale).reshape(3),
            opacity_logit=float(logit(opacity)),
            color_logit=logit(color).reshape(3),
        )

    @property
    def scale(self):
        return np.exp(self.log_scale)

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))

    @property
    def color(self):
        return sigmoid(self.color_logit)


@dataclass
class GaussianScene:
    """Struct-of-arrays scene: the unit the rasterizer and optimizer work on."""

    means: np.ndarray          # (N, 3)
    quats: np.ndarray          # (N, 4)
    log_scales: np.ndarray     # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    color_logits: np.ndarray   # (N, 3)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        n = self.means.shape[0]
        self.means = self.means.reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.color_logits = np.asarray(self.color_logits, dtype=np.float64).reshape(n, 3)

    def __len__(self) -> int:
        return self.means.shape[0]

    @staticmethod
    def from_gaussians(gaussians: list[Gaussian]) -> "GaussianScene":
        if not gaussians:
            return GaussianScene(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                                 np.zeros(0), np.zeros((0, 3)))
        return GaussianScene(
            means=np.stack([g.mu for g in gaussians]),
            quats=np.stack([g.quat for g in gaussians]),
            log_scales=np.stack([g.log_scale for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]),
            color_logits=np.stack([g.color_logit for g in gaussians]),
        )

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def colors(self) -> np.ndarray:
        return sigmoid(self.color_logits)

    def copy(self) -> "GaussianScene":
        return GaussianScene(self.means.copy(), self.quats.copy(), self.log_scales.copy(),
                             self.opacity_logits.copy(), self.color_logits.copy())


def _as_scene(scene) -> GaussianScene:
    if isinstance(scene, GaussianScene):
        return scene
    return GaussianScene.from_gaussians(list(scene))


def covariance3d(quat: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """World-frame covariance R S S^T R^T of one Gaussian."""
    scale = np.asarray(scale, dtype=np.float64).reshape(3)
    if np.any(scale <= 0.0):
        raise ValueError("covariance3d: scale must be strictly positive")
    r = se3.quat_to_rot(quat)
    m = r * scale[None, :]
    return m @ m.T


@dataclass(frozen=True)
class Projected2D:
    """One Gaussian after projection: pixel center, 2D covariance, depth."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float


@dataclass
class ProjectedScene:
    """Per-Gaussian projection intermediates retained for the backward pass."""

    cam_pos: np.ndarray    # (N, 3) camera-frame centers m_hat
    depth: np.ndarray      # (N,)
    mean2d: np.ndarray     # (N, 2)
    cov2d: np.ndarray      # (N, 2, 2) regularized
    conic: np.ndarray      # (N, 2, 2) inverse of cov2d
    jac: np.ndarray        # (N, 2, 3) perspective Jacobian at m_hat
    cov_cam: np.ndarray    # (N, 3, 3) camera-frame 3D covariance
    rot: np.ndarray        # (N, 3, 3) Gaussian rotation matrices (unit quats)
    pose_rot: np.ndarray   # (3, 3) rotation part of the world-to-camera pose
    valid: np.ndarray      # (N,) bool, in front of the near plane


def project_scene(scene, pose: SE3Pose, cam: Camera, near: float = DEFAULT_NEAR) -> ProjectedScene:
    """Project all Gaussians; those behind the near plane are flagged invalid."""
    scene = _as_scene(scene)
    w_rot = se3.quat_to_matrix(pose.rotation)
    cam_pos = scene.means @ w_rot.T + pose.translation
    z = cam_pos[:, 2]
    valid = z > near
    zs = np.where(valid, z, 1.0)

    mean2d = np.stack(
        [cam.fx * cam_pos[:, 0] / zs + cam.cx, cam.fy * cam_pos[:, 1] / zs + cam.cy], axis=-1
    )

    n = len(scene)
    rot = se3.quat_to_matrix(se3.quat_normalize(scene.quats)) if n else np.zeros((0, 3, 3))
    m = rot * scene.scales()[:, None, :]
    cov3d = m @ np.swapaxes(m, -1, -2)
    cov_cam = np.einsum("ij,njk,lk->nil", w_rot, cov3d, w_rot)

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * cam_pos[:, 0] / zs**2
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * cam_pos[:, 1] / zs**2

    cov2d = np.einsum("nij,njk,nlk->nil", jac, cov_cam, jac)
    cov2d[:, 0, 0] += COV2D_REG
    cov2d[:, 1, 1] += COV2D_REG

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / det
    conic[:, 1, 1] = cov2d[:, 0, 0] / det
    conic[:, 0, 1] = conic[:, 1, 0] = -cov2d[:, 0, 1] / det

    return ProjectedScene(cam_pos=cam_pos, depth=z, mean2d=mean2d, cov2d=cov2d,
                          conic=conic, jac=jac, cov_cam=cov_cam, rot=rot,
                          pose_rot=w_rot, valid=valid)


def project(gaussian: Gaussian, pose: SE3Pose, cam: Camera,
            near: float = DEFAULT_NEAR) -> Projected2D | None:
    """Project one Gaussian; returns None when culled by the near plane."""
    proj = project_scene([gaussian], pose, cam, near=near)
    if not proj.valid[0]:
        return None
    return Projected2D(mean2d=proj.mean2d[0], cov2d=proj.cov2d[0], depth=float(proj.depth[0]))


@dataclass
class RenderTape:
    """Forward-pass record: image plus the per-pixel compositing fragments.

    Fragments are stored sorted by pixel, front to back within each
    pixel; ``frag_trans`` holds the transmittance accumulated before
    each fragment and ``frag_gate`` marks fragments processed before the
    transmittance stop fired.
    """

    image: np.ndarray
    background: np.ndarray
    cam: Camera
    proj: ProjectedScene
    colors: np.ndarray
    opacities: np.ndarray
    scene: GaussianScene
    frag_pixel: np.ndarray
    frag_gauss: np.ndarray
    frag_alpha: np.ndarray
    frag_trans: np.ndarray
    frag_gate: np.ndarray
    final_trans: np.ndarray
    alpha_cutoff: float
    trans_stop: float

    def pixel_entries(self, ix: int, iy: int) -> list[tuple[int, float, float]]:
        """(gaussian index, alpha, transmittance prefix) list for one pixel."""
        flat = iy * self.cam.width + ix
        sel = self.frag_pixel == flat
        return list(zip(self.frag_gauss[sel].tolist(),
                        self.frag_alpha[sel].tolist(),
                        self.frag_trans[sel].tolist()))


def _fragment_response(proj: ProjectedScene, frag_gauss, frag_x, frag_y):
    """Per-fragment offset, Mahalanobis sigma (shared by forward/backward)."""
    mean = proj.mean2d[frag_gauss]
    dx = frag_x - mean[:, 0]
    dy = frag_y - mean[:, 1]
    con = proj.conic[frag_gauss]
    sigma = 0.5 * (con[:, 0, 0] * dx * dx + 2.0 * con[:, 0, 1] * dx * dy
                   + con[:, 1, 1] * dy * dy)
    return dx, dy, sigma


def rasterize(scene, pose: SE3Pose, cam: Camera, background=(0.0, 0.0, 0.0), *,
              alpha_cutoff: float = DEFAULT_ALPHA_CUTOFF,
              trans_stop: float = DEFAULT_TRANS_STOP,
              near: float = DEFAULT_NEAR,
              exact: bool = False) -> RenderTape:
    """Render the scene from a world-to-camera pose.

    ``exact=True`` disables the alpha cutoff, the transmittance stop and
    the 3-sigma influence window so the forward map is smooth end to
    end (used by gradient checks); rendering cost grows accordingly.
    """
    scene = _as_scene(scene)
    proj = project_scene(scene, pose, cam, near=near)
    return composite_projected(scene, proj, cam, background, alpha_cutoff=alpha_cutoff,
                               trans_stop=trans_stop, exact=exact)


def composite_projected(scene: GaussianScene, proj: ProjectedScene, cam: Camera,
                        background=(0.0, 0.0, 0.0), *,
                        alpha_cutoff: float = DEFAULT_ALPHA_CUTOFF,
                        trans_stop: float = DEFAULT_TRANS_STOP,
                        exact: bool = False) -> RenderTape:
    """Depth-sorted front-to-back compositing of an already projected scene."""
    background = np.asarray(background, dtype=np.float64).reshape(3)
    if exact:
        alpha_cutoff = 0.0
        trans_stop = 0.0
    h, w = cam.height, cam.width
    n_pix = h * w

    opacities = scene.opacities()
    colors = scene.colors()

    vis = np.flatnonzero(proj.valid)
    order = vis[np.lexsort((vis, proj.depth[vis]))] if vis.size else vis

    # per-Gaussian influence windows, then one flat fragment array
    if order.size:
        if exact:
            x0 = np.zeros(order.size, dtype=np.int64)
            y0 = np.zeros(order.size, dtype=np.int64)
            x1 = np.full(order.size, w - 1, dtype=np.int64)
            y1 = np.full(order.size, h - 1, dtype=np.int64)
        else:
            rx = WINDOW_SIGMAS * np.sqrt(proj.cov2d[order, 0, 0])
            ry = WINDOW_SIGMAS * np.sqrt(proj.cov2d[order, 1, 1])
            mx, my = proj.mean2d[order, 0], proj.mean2d[order, 1]
            x0 = np.maximum(0, np.ceil(mx - rx)).astype(np.int64)
            x1 = np.minimum(w - 1, np.floor(mx + rx)).astype(np.int64)
            y0 = np.maximum(0, np.ceil(my - ry)).astype(np.int64)
            y1 = np.minimum(h - 1, np.floor(my + ry)).astype(np.int64)
        bw = x1 - x0 + 1
        bh = y1 - y0 + 1
        keep_g = (bw > 0) & (bh > 0)
        order, x0, y0, bw, bh = order[keep_g], x0[keep_g], y0[keep_g], bw[keep_g], bh[keep_g]
        sizes = bw * bh
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        frag_gauss = np.repeat(order, sizes)
        local = np.arange(sizes.sum(), dtype=np.int64) - np.repeat(offsets, sizes)
        bw_f = np.repeat(bw, sizes)
        frag_pixel = ((np.repeat(y0, sizes) + local // bw_f) * w
                      + np.repeat(x0, sizes) + local % bw_f)
    else:
        frag_pixel = np.zeros(0, dtype=np.int64)
        frag_gauss = np.zeros(0, dtype=np.int64)

    _, _, sigma = _fragment_response(proj, frag_gauss,
                                     (frag_pixel % w).astype(np.float64),
                                     (frag_pixel // w).astype(np.float64))
    alpha = np.minimum(opacities[frag_gauss] * np.exp(-sigma), ALPHA_MAX)

    keep = alpha >= alpha_cutoff if alpha_cutoff > 0.0 else slice(None)
    frag_pixel = frag_pixel[keep]
    frag_gauss = frag_gauss[keep]
    alpha = alpha[keep]

    # stable sort groups fragments per pixel, preserving depth order inside
    sort = np.argsort(frag_pixel, kind="stable")
    frag_pixel = frag_pixel[sort]
    frag_gauss = frag_gauss[sort]
    alpha = alpha[sort]

    log_one_minus = np.log1p(-alpha)
    csum = np.cumsum(log_one_minus)
    excl = csum - log_one_minus
    if frag_pixel.size:
        starts = np.r_[0, np.flatnonzero(np.diff(frag_pixel)) + 1]
        counts = np.diff(np.r_[starts, frag_pixel.size])
        start_of = np.repeat(starts, counts)
        trans = np.exp(excl - excl[start_of])
    else:
        trans = np.zeros(0)
    gate = trans >= trans_stop if trans_stop > 0.0 else np.ones(trans.shape, dtype=bool)

    weight = alpha * trans * gate
    img = np.zeros((n_pix, 3))
    for c in range(3):
        img[:, c] = np.bincount(frag_pixel, weights=weight * colors[frag_gauss, c],
                                minlength=n_pix)
    final_trans = np.exp(np.bincount(frag_pixel, weights=log_one_minus * gate,
                                     minlength=n_pix))
    img += background[None, :] * final_trans[:, None]

    return RenderTape(image=img.reshape(h, w, 3), background=background, cam=cam,
                      proj=proj, colors=colors, opacities=opacities, scene=scene,
                      frag_pixel=frag_pixel, frag_gauss=frag_gauss, frag_alpha=alpha,
                      frag_trans=trans, frag_gate=gate, final_trans=final_trans,
                      alpha_cutoff=alpha_cutoff, trans_stop=trans_stop)


def render(scene, pose: SE3Pose, cam: Camera, background=(0.0, 0.0, 0.0), **kw) -> np.ndarray:
    return rasterize(scene, pose, cam, background, **kw).image


def to_gray(image: np.ndarray) -> np.ndarray:
    return image @ GRAY_WEIGHTS


def render_gray(scene, pose: SE3Pose, cam: Camera, background=(0.0, 0.0, 0.0), **kw) -> np.ndarray:
    """Rasterize, then convert to luminance with weights (.299, .587, .114)."""
    return to_gray(render(scene, pose, cam, background, **kw))


@dataclass
class RenderGrads:
    """Gradients in the stored (optimization) parameterization."""

    d_means: np.ndarray          # (N, 3)
    d_quats: np.ndarray          # (N, 4)
    d_log_scales: np.ndarray     # (N, 3)
    d_opacity_logits: np.ndarray  # (N,)
    d_color_logits: np.ndarray   # (N, 3)
    pose_twist: np.ndarray       # (6,) [rho, phi], left perturbation of the pose

    def __iadd__(self, other: "RenderGrads") -> "RenderGrads":
        self.d_means += other.d_means
        self.d_quats += other.d_quats
        self.d_log_scales += other.d_log_scales
        self.d_opacity_logits += other.d_opacity_logits
        self.d_color_logits += other.d_color_logits
        self.pose_twist += other.pose_twist
        return self

    @staticmethod
    def zeros(n: int) -> "RenderGrads":
        return RenderGrads(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
                           np.zeros(n), np.zeros((n, 3)), np.zeros(6))

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "means": self.d_means, "quats": self.d_quats, "log_scales": self.d_log_scales,
            "opacity_logits": self.d_opacity_logits, "color_logits": self.d_color_logits,
            "pose": self.pose_twist,
        }


def backward(tape: RenderTape, dL_dC: np.ndarray) -> RenderGrads:
    """Analytic gradients for a loss with image gradient ``dL_dC`` (H, W, 3).

    Gaussian-parameter gradients are exact derivatives of the forward
    pass (including the 2D-covariance dependence on the projection
    Jacobian).  The pose twist gradient keeps only the position term:
    it flows through the projected centers with the 2D covariances
    frozen at the evaluation pose.
    """
    cam, proj, scene = tape.cam, tape.proj, tape.scene
    h, w = cam.height, cam.width
    if dL_dC.shape != (h, w, 3):
        raise ValueError(f"backward: dL_dC shape {dL_dC.shape} does not match image {(h, w, 3)}")
    n = len(scene)
    grads = RenderGrads.zeros(n)
    if tape.frag_pixel.size == 0:
        return grads

    g_flat = np.asarray(dL_dC, dtype=np.float64).reshape(-1, 3)
    fp, fg = tape.frag_pixel, tape.frag_gauss
    alpha, trans, gate = tape.frag_alpha, tape.frag_trans, tape.frag_gate
    gp = g_flat[fp]
    cg = tape.colors[fg]
    weight = alpha * trans * gate

    # color gradient: dC/dc_i = alpha_i T_i per channel
    for c in range(3):
        grads.d_color_logits[:, c] = np.bincount(fg, weights=weight * gp[:, c], minlength=n)

    # alpha gradient via per-pixel suffix sums
    cdot = np.einsum("fc,fc->f", cg, gp)
    contrib = cdot * weight
    bgdot = g_flat @ tape.background
    tot = np.bincount(fp, weights=contrib, minlength=h * w) + bgdot * tape.final_trans
    starts = np.r_[0, np.flatnonzero(np.diff(fp)) + 1]
    counts = np.diff(np.r_[starts, fp.size])
    start_of = np.repeat(starts, counts)
    csum = np.cumsum(contrib)
    incl = csum - csum[start_of] + contrib[start_of]
    suffix = tot[fp] - incl
    d_alpha = gate * (cdot * trans - suffix / (1.0 - alpha))

    # chain through alpha = min(o exp(-sigma), ALPHA_MAX)
    dx, dy, sigma = _fragment_response(proj, fg, (fp % w).astype(np.float64),
                                       (fp // w).astype(np.float64))
    response = np.exp(-sigma)
    unclamped = tape.opacities[fg] * response <= ALPHA_MAX
    d_alpha = d_alpha * unclamped
    d_opacity = np.bincount(fg, weights=response * d_alpha, minlength=n)
    d_sigma = -alpha * d_alpha

    con = proj.conic[fg]
    d_dx = d_sigma * (con[:, 0, 0] * dx + con[:, 0, 1] * dy)
    d_dy = d_sigma * (con[:, 0, 1] * dx + con[:, 1, 1] * dy)
    d_mean2d = np.stack(
        [-np.bincount(fg, weights=d_dx, minlength=n), -np.bincount(fg, weights=d_dy, minlength=n)],
        axis=-1,
    )

    # dsigma/dP = 1/2 Delta Delta^T for the conic matrix P
    g_conic = np.zeros((n, 2, 2))
    g_conic[:, 0, 0] = np.bincount(fg, weights=0.5 * d_sigma * dx * dx, minlength=n)
    g_conic[:, 1, 1] = np.bincount(fg, weights=0.5 * d_sigma * dy * dy, minlength=n)
    off = np.bincount(fg, weights=0.5 * d_sigma * dx * dy, minlength=n)
    g_conic[:, 0, 1] = g_conic[:, 1, 0] = off

    # P = cov2d^-1  =>  dL/dcov2d = -P (dL/dP) P
    g_cov2d = -np.einsum("nij,njk,nkl->nil", proj.conic, g_conic, proj.conic)

    # cov2d = J cov_cam J^T + reg I
    g_cov_cam = np.einsum("nji,njk,nkl->nil", proj.jac, g_cov2d, proj.jac)
    g_jac = 2.0 * np.einsum("nij,njk,nkl->nil", g_cov2d, proj.jac, proj.cov_cam)

    # cov_cam = W cov3d W^T with W the pose rotation
    g_cov3d = np.einsum("ji,njk,kl->nil", proj.pose_rot, g_cov_cam, proj.pose_rot)

    # cov3d = M M^T with M = R diag(s)
    scales = scene.scales()
    m_mat = proj.rot * scales[:, None, :]
    g_m = 2.0 * np.einsum("nij,njk->nik", g_cov3d, m_mat)
    d_scales = np.einsum("nik,nik->nk", proj.rot, g_m)
    grads.d_log_scales[:] = d_scales * scales
    g_rot = g_m * scales[:, None, :]

    # rotation matrix -> quaternion (then the normalization chain)
    qn = se3.quat_normalize(scene.quats)
    qw, qx, qy, qz = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = g_rot
    d_qhat = np.stack(
        [
            2.0 * (-qz * g[:, 0, 1] + qy * g[:, 0, 2] + qz * g[:, 1, 0]
                   - qx * g[:, 1, 2] - qy * g[:, 2, 0] + qx * g[:, 2, 1]),
            2.0 * (qy * g[:, 0, 1] + qz * g[:, 0, 2] + qy * g[:, 1, 0]
                   - 2.0 * qx * g[:, 1, 1] - qw * g[:, 1, 2] + qz * g[:, 2, 0]
                   + qw * g[:, 2, 1] - 2.0 * qx * g[:, 2, 2]),
            2.0 * (-2.0 * qy * g[:, 0, 0] + qx * g[:, 0, 1] + qw * g[:, 0, 2]
                   + qx * g[:, 1, 0] + qz * g[:, 1, 2] - qw * g[:, 2, 0]
                   + qz * g[:, 2, 1] - 2.0 * qy * g[:, 2, 2]),
            2.0 * (-2.0 * qz * g[:, 0, 0] - qw * g[:, 0, 1] + qx * g[:, 0, 2]
                   + qw * g[:, 1, 0] - 2.0 * qz * g[:, 1, 1] + qy * g[:, 1, 2]
                   + qx * g[:, 2, 0] + qy * g[:, 2, 1]),
        ],
        axis=-1,
    )
    qnorm = np.linalg.norm(scene.quats, axis=-1, keepdims=True)
    grads.d_quats[:] = (d_qhat - np.einsum("ni,ni->n", d_qhat, qn)[:, None] * qn) / qnorm

    # projected-center path (position term): dm'/dm_hat equals the Jacobian
    d_cam_pos = np.einsum("nji,nj->ni", proj.jac, d_mean2d)

    # Jacobian entries depend on the camera-frame center
    zs = np.where(proj.valid, proj.depth, 1.0)
    xh, yh = proj.cam_pos[:, 0], proj.cam_pos[:, 1]
    fx, fy = cam.fx, cam.fy
    d_cam_full = d_cam_pos.copy()
    d_cam_full[:, 0] += g_jac[:, 0, 2] * (-fx / zs**2)
    d_cam_full[:, 1] += g_jac[:, 1, 2] * (-fy / zs**2)
    d_cam_full[:, 2] += (g_jac[:, 0, 0] * (-fx / zs**2) + g_jac[:, 0, 2] * (2.0 * fx * xh / zs**3)
                         + g_jac[:, 1, 1] * (-fy / zs**2) + g_jac[:, 1, 2] * (2.0 * fy * yh / zs**3))

    invalid = ~proj.valid
    d_cam_pos[invalid] = 0.0
    d_cam_full[invalid] = 0.0
    grads.d_means[:] = d_cam_full @ proj.pose_rot

    grads.pose_twist[:3] = d_cam_pos.sum(axis=0)
    grads.pose_twist[3:] = se3.cross3(proj.cam_pos, d_cam_pos).sum(axis=0)

    # activation chains
    o = tape.opacities
    grads.d_opacity_logits[:] = d_opacity * o * (1.0 - o)
    grads.d_color_logits *= tape.colors * (1.0 - tape.colors)
    return grads


# ---------------------------------------------------------------------------
# scene serialization (checkpoints)
# ---------------------------------------------------------------------------

_SCENE_HEADER = "besplat-scene v1"


def scene_to_text(scene: GaussianScene) -> str:
    lines = [_SCENE_HEADER, f"count {len(scene)}"]
    for i in range(len(scene)):
        vals = np.concatenate([scene.means[i], scene.quats[i], scene.log_scales[i],
                               [scene.opacity_logits[i]], scene.color_logits[i]])
        lines.append(" ".join(f"{v:.17g}" for v in vals))
    return "\n".join(lines) + "\n"


def scene_from_text(text: str) -> GaussianScene:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _SCENE_HEADER:
        raise ValueError("not a besplat scene record")
    n = int(lines[1].split()[1])
    if len(lines) != 2 + n:
        raise ValueError(f"scene record announces {n} gaussians, found {len(lines) - 2}")
    data = np.array([[float(v) for v in ln.split()] for ln in lines[2:]]).reshape(n, 14)
    return GaussianScene(means=data[:, 0:3], quats=data[:, 3:7], log_scales=data[:, 7:10],
                         opacity_logits=data[:, 10], color_logits=data[:, 11:14])


def save_scene(path, scene: GaussianScene) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(scene_to_text(scene))


def load_scene(path) -> GaussianScene:
    with open(path, "r", encoding="utf-8") as fh:
        return scene_from_text(fh.read())
