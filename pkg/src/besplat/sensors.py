"""Physical formation models: motion-blurred frames and event images.

A blurry observation is the arithmetic mean of virtual sharp renders at
poses sampled uniformly over the exposure.  Event images accumulate
signed polarities scaled by the contrast threshold; the synthesized
counterpart is the log-luminance difference of two sharp grayscale
renders.

Trajectory poses are camera-to-world; this module inverts them before
handing poses to the rasterizer.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import render as rnd
from . import se3, trajectory
from .render import Camera
from .trajectory import Trajectory

# added inside both logarithms of the synthesized event image so the
# gradient stays bounded as rendered luminance approaches zero
EPS_LOG = 1e-5


@dataclass
class EventStream:
    """Time-ordered events (x, y, t, p) with the sensor's contrast threshold."""

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    threshold: float
    width: int
    height: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.int64)
        if not (self.x.shape == self.y.shape == self.t.shape == self.p.shape):
            raise ValueError("event stream fields must share one length")
        if not self.threshold > 0.0:
            raise ValueError("contrast threshold must be positive")
        if self.t.size:
            if np.any(np.diff(self.t) < 0.0):
                raise ValueError("event timestamps must be non-decreasing")
            if np.any((self.x < 0) | (self.x >= self.width) | (self.y < 0) | (self.y >= self.height)):
                raise ValueError("event pixel coordinates outside resolution")
            if not np.all(np.isin(self.p, (-1, 1))):
                raise ValueError("event polarity must be -1 or +1")

    def __len__(self) -> int:
        return self.t.size


@dataclass
class EventImage:
    """Signed accumulation (log-intensity units) over the image.

    For accumulated real events the integer polarity ``counts`` are kept
    alongside ``values = threshold * counts`` so that sums over disjoint
    time windows stay exact; synthesized images carry values only.
    """

    values: np.ndarray
    normalized: bool = False
    counts: np.ndarray | None = None
    threshold: float | None = None

    def __add__(self, other: "EventImage") -> "EventImage":
        if self.normalized or other.normalized:
            raise ValueError("cannot add normalized event images")
        if (self.counts is not None and other.counts is not None
                and self.threshold == other.threshold):
            counts = self.counts + other.counts
            return EventImage(self.threshold * counts, counts=counts, threshold=self.threshold)
        return EventImage(self.values + other.values)


def synth_blur(scene, traj: Trajectory, cam: Camera, n: int,
               background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Mean of n sharp renders at uniform exposure samples (n=1: exposure start)."""
    img, _ = synth_blur_with_tapes(scene, traj, cam, n, background)
    return img


def synth_blur_with_tapes(scene, traj: Trajectory, cam: Camera, n: int,
                          background=(0.0, 0.0, 0.0), **raster_kw):
    """Blurry image plus the per-sample render tapes the optimizer backprops through."""
    if n < 1:
        raise ValueError(f"blur needs at least one sample, got {n}")
    if n == 1:
        times = np.asarray([traj.exposure[0]])
    else:
        times = trajectory.exposure_times(traj, n)
    q, t = trajectory.eval_pose_batch(traj, times)
    tapes = []
    acc = None
    for i in range(times.size):
        view = se3.inverse(se3.SE3Pose(q[i], t[i]))
        tape = rnd.rasterize(scene, view, cam, background, **raster_kw)
        tapes.append(tape)
        acc = tape.image.copy() if acc is None else acc + tape.image
    return acc / times.size, (times, tapes)


def accumulate_events(stream: EventStream, t_a: float, t_b: float) -> EventImage:
    """Threshold-scaled polarity sum over the half-open window (t_a, t_b]."""
    if not t_a < t_b:
        raise ValueError(f"accumulate_events: need t_a < t_b, got [{t_a}, {t_b}]")
    i0 = np.searchsorted(stream.t, t_a, side="right")
    i1 = np.searchsorted(stream.t, t_b, side="right")
    flat = stream.y[i0:i1] * stream.width + stream.x[i0:i1]
    counts = np.bincount(flat, weights=stream.p[i0:i1].astype(np.float64),
                         minlength=stream.width * stream.height)
    counts = counts.reshape(stream.height, stream.width)
    return EventImage(stream.threshold * counts, counts=counts, threshold=stream.threshold)


def normalize_event_image(image: EventImage, floor: float = 0.0) -> EventImage:
    """Scale to unit L2 norm over all pixels; an all-zero image stays zero.

    A positive ``floor`` bounds the divisor from below: near-zero images
    are scaled by the floor instead of their own vanishing norm.  The
    training loop uses this to keep the loss well-conditioned while the
    synthesized motion is still close to constant; the default keeps the
    exact unit-norm contract.
    """
    norm = float(np.linalg.norm(image.values))
    if norm == 0.0 and floor == 0.0:
        return EventImage(image.values.copy(), normalized=True)
    return EventImage(image.values / max(norm, floor), normalized=True)


def synth_event_image(scene, traj: Trajectory, t_i: float, t_j: float, cam: Camera,
                      background=(0.0, 0.0, 0.0)) -> EventImage:
    """Log-luminance difference of sharp renders at the window endpoints."""
    image, _ = synth_event_image_with_tapes(scene, traj, t_i, t_j, cam, background)
    return image


def synth_event_image_with_tapes(scene, traj: Trajectory, t_i: float, t_j: float,
                                 cam: Camera, background=(0.0, 0.0, 0.0), **raster_kw):
    if not t_i < t_j:
        raise ValueError(f"synth_event_image: need t_i < t_j, got [{t_i}, {t_j}]")
    q, t = trajectory.eval_pose_batch(traj, np.asarray([t_i, t_j]))
    tape_start = rnd.rasterize(scene, se3.inverse(se3.SE3Pose(q[0], t[0])), cam,
                               background, **raster_kw)
    tape_end = rnd.rasterize(scene, se3.inverse(se3.SE3Pose(q[1], t[1])), cam,
                             background, **raster_kw)
    gray_start = rnd.to_gray(tape_start.image)
    gray_end = rnd.to_gray(tape_end.image)
    values = np.log(gray_end + EPS_LOG) - np.log(gray_start + EPS_LOG)
    return EventImage(values), (tape_start, tape_end, gray_start, gray_end)


# ---------------------------------------------------------------------------
# event stream file format: header "width height threshold", then one
# event per line "t x y p" with t printed at 9 decimal places
# ---------------------------------------------------------------------------

def write_events(path, stream: EventStream) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{stream.width} {stream.height} {stream.threshold:.17g}\n")
        for i in range(len(stream)):
            fh.write(f"{stream.t[i]:.9f} {stream.x[i]} {stream.y[i]} {stream.p[i]}\n")


def read_events(path) -> EventStream:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise ValueError("event file must start with 'width height threshold'")
        width, height, threshold = int(header[0]), int(header[1]), float(header[2])
        body = fh.read()
    if body.strip():
        data = np.loadtxt(io.StringIO(body), dtype=np.float64, ndmin=2)
    else:
        data = np.zeros((0, 4))
    if data.shape[1] != 4:
        raise ValueError("event lines must hold 't x y p'")
    return EventStream(x=data[:, 1].astype(np.int64), y=data[:, 2].astype(np.int64),
                       t=data[:, 0], p=data[:, 3].astype(np.int64),
                       threshold=threshold, width=width, height=height)
