"""Continuous camera motion over an exposure window.

Three interchangeable models over SE(3) control knots:

* ``LINEAR``        - geodesic interpolation between 2 knots,
* ``CUBIC_BSPLINE`` - cumulative cubic B-spline over >= 4 uniformly
  spaced knots (segment index ``k = floor((t - t0)/dt)``, cumulative
  basis weights applied to successive relative twists); unlike the
  other two models it does not interpolate its knots,
* ``BEZIER7``       - order-7 Bezier over exactly 8 knots, evaluated by
  iterated De Casteljau with SE(3) geodesic interpolation at each level
  (endpoint-interpolating; reduces to the scalar Bezier for commuting
  translations).

Trajectory poses are camera-to-world transforms; the renderer consumes
their inverses.  Knot sensitivities are reported with respect to
right-multiplicative twist perturbations ``knot . exp(delta)`` - the
same convention the optimizer uses for its retraction updates - and are
computed by central finite differences through the full evaluation
chain (step ``KNOT_FD_STEP``).

For LINEAR and BEZIER7 the exposure maps to normalized time
``u = (t - t_start)/(t_end - t_start)``.  For CUBIC_BSPLINE the knots
cover ``[t0, t0 + (K - 3) dt]`` and the exposure must lie inside.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import se3
from .se3 import SE3Pose

KNOT_FD_STEP = 1e-5


class TrajectoryModel(Enum):
    LINEAR = "linear"
    CUBIC_BSPLINE = "cubic_bspline"
    BEZIER7 = "bezier7"


_BEZIER7_KNOTS = 8


@dataclass(frozen=True)
class CumulativeBasis:
    """Cumulative B-spline basis weights (b0 is identically 1)."""

    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "b", np.asarray(self.b, dtype=np.float64).reshape(4))


def cumulative_basis(u: float) -> CumulativeBasis:
    """Cumulative cubic basis at normalized segment time u in [0, 1)."""
    if not (0.0 <= u < 1.0):
        raise ValueError(f"cumulative_basis: u={u} outside [0, 1)")
    return CumulativeBasis(_basis_components(np.asarray(u, dtype=np.float64)))


def _basis_components(u: np.ndarray) -> np.ndarray:
    """(..., 4) cumulative basis: (1/6) M [1, u, u^2, u^3]."""
    u2 = u * u
    u3 = u2 * u
    one = np.ones_like(u)
    return np.stack(
        [
            one,
            (5.0 + 3.0 * u - 3.0 * u2 + u3) / 6.0,
            (1.0 + 3.0 * u + 3.0 * u2 - 2.0 * u3) / 6.0,
            u3 / 6.0,
        ],
        axis=-1,
    )


@dataclass
class Trajectory:
    """Control knots plus model tag and exposure interval.

    ``dt`` is the uniform knot spacing and only meaningful for
    CUBIC_BSPLINE; ``t0`` is the time of the first knot.
    """

    model: TrajectoryModel
    knots: list[SE3Pose]
    exposure: tuple[float, float]
    t0: float = 0.0
    dt: float | None = None

    def __post_init__(self):
        self.exposure = (float(self.exposure[0]), float(self.exposure[1]))
        ts, te = self.exposure
        if not te > ts:
            raise ValueError("trajectory exposure must have positive duration")
        k = len(self.knots)
        if self.model is TrajectoryModel.LINEAR and k != 2:
            raise ValueError(f"linear trajectory needs exactly 2 knots, got {k}")
        if self.model is TrajectoryModel.BEZIER7 and k != _BEZIER7_KNOTS:
            raise ValueError(f"order-7 Bezier trajectory needs exactly 8 knots, got {k}")
        if self.model is TrajectoryModel.CUBIC_BSPLINE:
            if k < 4:
                raise ValueError(f"cubic B-spline trajectory needs >= 4 knots, got {k}")
            if self.dt is None or not self.dt > 0.0:
                raise ValueError("cubic B-spline trajectory needs dt > 0")
            lo, hi = self.coverage()
            tol = 1e-9 * self.dt
            if ts < lo - tol or te > hi + tol:
                raise ValueError(
                    f"exposure [{ts}, {te}] outside spline coverage [{lo}, {hi}]"
                )

    def coverage(self) -> tuple[float, float]:
        """Time interval over which the trajectory can be evaluated."""
        if self.model is TrajectoryModel.CUBIC_BSPLINE:
            return (self.t0, self.t0 + (len(self.knots) - 3) * self.dt)
        return self.exposure

    def knot_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        q = np.stack([p.rotation for p in self.knots])
        t = np.stack([p.translation for p in self.knots])
        return q, t


def constant(model: TrajectoryModel, pose: SE3Pose, exposure: tuple[float, float],
             n_knots: int | None = None) -> Trajectory:
    """Trajectory with all knots equal to one pose (the solver's init)."""
    ts, te = exposure
    if model is TrajectoryModel.LINEAR:
        k = 2
    elif model is TrajectoryModel.BEZIER7:
        k = _BEZIER7_KNOTS
    else:
        k = n_knots if n_knots is not None else 4
    dt = None
    if model is TrajectoryModel.CUBIC_BSPLINE:
        dt = (te - ts) / (k - 3)
    return Trajectory(model, [pose] * k, exposure, t0=ts, dt=dt)


# ---------------------------------------------------------------------------
# batched evaluation core; kq (B, K, 4), kt (B, K, 3)
# ---------------------------------------------------------------------------

def _geolerp_qt(qa, ta, qb, tb, u):
    """Geodesic interpolation a . exp(u log(a^-1 b)), batched."""
    qi, ti = se3.se3_inverse_qt(qa, ta)
    qr, tr = se3.se3_compose_qt(qi, ti, qb, tb)
    rho, phi = se3.se3_log_qt(qr, tr)
    qd, td = se3.se3_exp_qt(u * rho, u * phi)
    return se3.se3_compose_qt(qa, ta, qd, td)


def _eval_linear_qt(kq, kt, u):
    return _geolerp_qt(kq[:, 0], kt[:, 0], kq[:, 1], kt[:, 1], u[:, None])


def _eval_bezier_qt(kq, kt, u):
    q, t = kq, kt
    uu = u[:, None, None]
    while q.shape[1] > 1:
        q, t = _geolerp_qt(q[:, :-1], t[:, :-1], q[:, 1:], t[:, 1:], uu)
    return q[:, 0], t[:, 0]


def _eval_bspline_qt(kq, kt, times, t0, dt):
    n_knots = kq.shape[1]
    s = (times - t0) / dt
    tol = 1e-9
    if np.any(s < -tol) or np.any(s > (n_knots - 3) + tol):
        raise ValueError("cubic B-spline evaluated outside knot coverage")
    k = np.clip(np.floor(s).astype(np.int64), 0, n_knots - 4)
    u = np.clip(s - k, 0.0, 1.0)
    rows = np.arange(kq.shape[0])[:, None]
    cols = k[:, None] + np.arange(4)[None, :]
    gq = kq[rows, cols]  # (B, 4, 4)
    gt = kt[rows, cols]  # (B, 4, 3)
    qi, ti = se3.se3_inverse_qt(gq[:, :3], gt[:, :3])
    qrel, trel = se3.se3_compose_qt(qi, ti, gq[:, 1:], gt[:, 1:])
    rho, phi = se3.se3_log_qt(qrel, trel)  # (B, 3, 3) twists Omega_k..Omega_k+2
    b = _basis_components(u)  # (B, 4); b[:, 1:] scale the three twists
    q, t = gq[:, 0], gt[:, 0]
    for j in range(3):
        w = b[:, j + 1][:, None]
        qe, te = se3.se3_exp_qt(w * rho[:, j], w * phi[:, j])
        q, t = se3.se3_compose_qt(q, t, qe, te)
    return q, t


def _eval_batch(model, kq, kt, times, exposure, t0, dt):
    """Poses (B,) at times (B,) for knot sets (B, K, .)."""
    ts, te = exposure
    if model is TrajectoryModel.CUBIC_BSPLINE:
        return _eval_bspline_qt(kq, kt, times, t0, dt)
    u = (times - ts) / (te - ts)
    tol = 1e-9
    if np.any(u < -tol) or np.any(u > 1.0 + tol):
        raise ValueError("trajectory evaluated outside the exposure window")
    u = np.clip(u, 0.0, 1.0)
    if model is TrajectoryModel.LINEAR:
        return _eval_linear_qt(kq, kt, u)
    return _eval_bezier_qt(kq, kt, u)


# ---------------------------------------------------------------------------
# public evaluation
# ---------------------------------------------------------------------------

def eval_linear(traj: Trajectory, u: float) -> SE3Pose:
    """T0 . exp(u log(T0^-1 T1)) at normalized time u in [0, 1]."""
    if traj.model is not TrajectoryModel.LINEAR or len(traj.knots) != 2:
        raise ValueError("eval_linear requires a linear trajectory with 2 knots")
    if not (0.0 <= u <= 1.0):
        raise ValueError(f"eval_linear: u={u} outside [0, 1]")
    kq, kt = traj.knot_arrays()
    q, t = _eval_linear_qt(kq[None], kt[None], np.asarray([u], dtype=np.float64))
    return SE3Pose(q[0], t[0])


def eval_bezier7(traj: Trajectory, u: float) -> SE3Pose:
    """Order-7 SE(3) De Casteljau at normalized time u in [0, 1]."""
    if traj.model is not TrajectoryModel.BEZIER7 or len(traj.knots) != _BEZIER7_KNOTS:
        raise ValueError("eval_bezier7 requires a Bezier trajectory with 8 knots")
    if not (0.0 <= u <= 1.0):
        raise ValueError(f"eval_bezier7: u={u} outside [0, 1]")
    kq, kt = traj.knot_arrays()
    q, t = _eval_bezier_qt(kq[None], kt[None], np.asarray([u], dtype=np.float64))
    return SE3Pose(q[0], t[0])


def eval_cubic_bspline(traj: Trajectory, t: float) -> SE3Pose:
    """Cumulative cubic B-spline pose at absolute time t (seconds)."""
    if traj.model is not TrajectoryModel.CUBIC_BSPLINE:
        raise ValueError("eval_cubic_bspline requires a cubic B-spline trajectory")
    kq, kt = traj.knot_arrays()
    q, tr = _eval_bspline_qt(kq[None], kt[None], np.asarray([t], dtype=np.float64),
                             traj.t0, traj.dt)
    return SE3Pose(q[0], tr[0])


def eval_pose(traj: Trajectory, t: float) -> SE3Pose:
    """Camera-to-world pose at absolute time t, any model."""
    q, tr = eval_pose_batch(traj, np.asarray([t], dtype=np.float64))
    return SE3Pose(q[0], tr[0])


def eval_pose_batch(traj: Trajectory, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quaternions (S, 4) and translations (S, 3) at times (S,)."""
    times = np.asarray(times, dtype=np.float64)
    kq, kt = traj.knot_arrays()
    b = times.shape[0]
    kq = np.broadcast_to(kq[None], (b,) + kq.shape)
    kt = np.broadcast_to(kt[None], (b,) + kt.shape)
    return _eval_batch(traj.model, kq, kt, times, traj.exposure, traj.t0, traj.dt)


def exposure_times(traj: Trajectory, n: int) -> np.ndarray:
    if n < 2:
        raise ValueError(f"need at least 2 exposure samples, got {n}")
    ts, te = traj.exposure
    return np.linspace(ts, te, n)


def sample_exposure(traj: Trajectory, n: int) -> list[SE3Pose]:
    """Poses at n uniform times spanning the exposure, endpoints included."""
    times = exposure_times(traj, n)
    q, t = eval_pose_batch(traj, times)
    return [SE3Pose(q[i], t[i]) for i in range(n)]


# ---------------------------------------------------------------------------
# knot sensitivities
# ---------------------------------------------------------------------------

def knot_jacobian(traj: Trajectory, times: np.ndarray, step: float = KNOT_FD_STEP) -> np.ndarray:
    """d(evaluated pose right-twist) / d(knot right-twist), shape (S, K, 6, 6).

    ``out[s, j, d, :]`` is the twist velocity of the pose at ``times[s]``
    per unit perturbation of knot j's coordinate d, obtained by central
    differences through the evaluation chain.  The optimizer contracts
    this with the renderer's pose gradients to get knot gradients.
    """
    times = np.asarray(times, dtype=np.float64)
    n_t = times.shape[0]
    kq, kt = traj.knot_arrays()
    n_k = kq.shape[0]
    n_pert = 2 * n_k * 6

    # one perturbed knot set per (knot, coord, sign)
    pq = np.broadcast_to(kq[None], (n_pert,) + kq.shape).copy()
    pt = np.broadcast_to(kt[None], (n_pert,) + kt.shape).copy()
    deltas = np.zeros((n_pert, 6))
    signs = np.repeat([1.0, -1.0], n_k * 6)
    idx = np.tile(np.arange(n_k * 6), 2)
    deltas[np.arange(n_pert), idx % 6] = signs * step
    knot_of = idx // 6
    dq, dtr = se3.se3_exp_qt(deltas[:, :3], deltas[:, 3:])
    base_q = kq[knot_of]
    base_t = kt[knot_of]
    new_q, new_t = se3.se3_compose_qt(base_q, base_t, dq, dtr)
    pq[np.arange(n_pert), knot_of] = new_q
    pt[np.arange(n_pert), knot_of] = new_t

    # evaluate every perturbed set at every time in one batch
    flat_q = np.broadcast_to(pq[None], (n_t,) + pq.shape).reshape(n_t * n_pert, n_k, 4)
    flat_t = np.broadcast_to(pt[None], (n_t,) + pt.shape).reshape(n_t * n_pert, n_k, 3)
    flat_times = np.repeat(times, n_pert)
    ev_q, ev_t = _eval_batch(traj.model, flat_q, flat_t, flat_times,
                             traj.exposure, traj.t0, traj.dt)

    bq, bt = eval_pose_batch(traj, times)
    bq = np.repeat(bq, n_pert, axis=0)
    bt = np.repeat(bt, n_pert, axis=0)
    qi, ti = se3.se3_inverse_qt(bq, bt)
    qrel, trel = se3.se3_compose_qt(qi, ti, ev_q, ev_t)
    rho, phi = se3.se3_log_qt(qrel, trel)
    tw = np.concatenate([rho, phi], axis=-1).reshape(n_t, 2, n_k, 6, 6)
    return (tw[:, 0] - tw[:, 1]) / (2.0 * step)


def apply_knot_updates(traj: Trajectory, deltas: np.ndarray) -> Trajectory:
    """New trajectory with knot_j <- knot_j . exp(deltas[j]), quats renormalized."""
    deltas = np.asarray(deltas, dtype=np.float64).reshape(len(traj.knots), 6)
    kq, kt = traj.knot_arrays()
    dq, dt = se3.se3_exp_qt(deltas[:, :3], deltas[:, 3:])
    nq, nt = se3.se3_compose_qt(kq, kt, dq, dt)
    knots = [SE3Pose(nq[i], nt[i]) for i in range(len(traj.knots))]
    return replace(traj, knots=knots)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def to_text(traj: Trajectory) -> str:
    lines = [
        f"model {traj.model.value}",
        f"t0 {traj.t0:.17g}",
        "dt none" if traj.dt is None else f"dt {traj.dt:.17g}",
        f"exposure {traj.exposure[0]:.17g} {traj.exposure[1]:.17g}",
        f"knots {len(traj.knots)}",
    ]
    for p in traj.knots:
        vals = np.concatenate([p.rotation, p.translation])
        lines.append(" ".join(f"{v:.17g}" for v in vals))
    return "\n".join(lines) + "\n"


def from_text(text: str) -> Trajectory:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    fields = {}
    for ln in lines[:5]:
        key, _, rest = ln.partition(" ")
        fields[key] = rest.strip()
    try:
        model = TrajectoryModel(fields["model"])
        t0 = float(fields["t0"])
        dt = None if fields["dt"] == "none" else float(fields["dt"])
        exposure = tuple(float(v) for v in fields["exposure"].split())
        n = int(fields["knots"])
    except (KeyError, ValueError) as err:
        raise ValueError(f"malformed trajectory record: {err}") from err
    if len(lines) != 5 + n:
        raise ValueError(f"trajectory record announces {n} knots, found {len(lines) - 5}")
    knots = []
    for ln in lines[5:]:
        vals = np.array([float(v) for v in ln.split()])
        if vals.shape != (7,):
            raise ValueError("knot line must hold 7 values: qw qx qy qz tx ty tz")
        knots.append(SE3Pose(vals[:4], vals[4:]))
    return Trajectory(model, knots, exposure, t0=t0, dt=dt)


def save(path, traj: Trajectory) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_text(traj))


def load(path) -> Trajectory:
    with open(path, "r", encoding="utf-8") as fh:
        return from_text(fh.read())
