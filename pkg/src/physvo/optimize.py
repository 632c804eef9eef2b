"""Direct optimization of window poses and anchor depths.

Poses of frames ``1..S-1`` (frame 0 is the gauge) and the log-depth of every
anchor are refined by gradient descent on the window objective. Selection and
masks are recomputed at every iterate; a step is accepted only if it lowers
the loss, halving it up to ``max_backtracks`` times before giving up. Each
search starts at twice the last accepted step, capped by the configured step
size, and restarts once below its last trial before reporting no descent.
Directions carry momentum from the last accepted step, which crosses the
long, narrow valleys a fixed depth map leaves in the pose objective.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegeneracyError, InvalidArgumentError
from .geometry import DepthMap, Intrinsics, Pose, backproject
from .losses import LossConfig, WindowInputs, loss_gradients, total_loss

log = logging.getLogger(__name__)

STALL_STEPS = 10


@dataclass(frozen=True)
class OptimConfig:
    max_iters: int = 300
    step_size: float = 0.02
    decay: float = 1.0
    grad_tol: float = 1e-8
    depth_lr_scale: float = 1.0
    max_backtracks: int = 8
    # "pixel_motion": pose steps along M^-1 g, M the mean image-motion metric of
    # the frame's own depth points (removes the rotation/translation coupling);
    # "euclidean": plain steps along -g in twist coordinates
    pose_metric: str = "pixel_motion"
    # heavy-ball weight on the last accepted direction; a search along it that
    # fails falls back to the plain preconditioned direction
    momentum: float = 0.8
    # stop once the last STALL_STEPS accepted steps lowered the loss by less
    # than this fraction in total
    loss_tol: float = 1e-6

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidArgumentError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.step_size > 0:
            raise InvalidArgumentError("step_size must be positive")
        if not 0 < self.decay <= 1:
            raise InvalidArgumentError("decay must lie in (0, 1]")
        if self.depth_lr_scale < 0:
            raise InvalidArgumentError("depth_lr_scale must be non-negative")
        if self.pose_metric not in ("pixel_motion", "euclidean"):
            raise InvalidArgumentError(f"unknown pose_metric {self.pose_metric!r}")
        if self.loss_tol < 0:
            raise InvalidArgumentError("loss_tol must be non-negative")
        if not 0 <= self.momentum < 1:
            raise InvalidArgumentError("momentum must lie in [0, 1)")
        if self.max_backtracks < 0:
            raise InvalidArgumentError("max_backtracks must be non-negative")


@dataclass
class WindowState:
    """Window-local camera-to-window poses and per-frame depth maps.

    Only anchor depths are optimized; the others stay as given and serve as
    source depth for the consistency term.
    """

    poses: list
    depths: list
    iteration: int = 0

    def copy(self) -> WindowState:
        return WindowState(
            [p.copy() for p in self.poses],
            [DepthMap(d.data.copy(), d.valid.copy()) for d in self.depths],
            self.iteration,
        )


@dataclass
class TraceEntry:
    iteration: int
    loss: float
    photo: float
    geo: float
    smooth: float
    valid_fraction: float


@dataclass
class OptimizeResult:
    state: WindowState
    trace: list = field(default_factory=list)
    converged: str = ""


def trace_entry(it, res) -> TraceEntry:
    return TraceEntry(it, res.loss, res.photo_mean, res.geo_mean, res.smooth_mean, res.valid_fraction)


def _inputs(frames, state: WindowState, k, anchors) -> WindowInputs:
    return WindowInputs(frames, state.depths, state.poses, k, anchors)


def motion_metric(k: Intrinsics, depth: DepthMap, max_points: int = 4096) -> np.ndarray:
    """Mean ``J^T J`` of the projection Jacobian w.r.t. a camera twist.

    Pixel motion is measured in focal-length units, so the rotation block is
    about the identity and the translation block about ``I / z^2``. A small
    ridge keeps the inverse bounded when motions are nearly ambiguous.
    """
    pts, valid = backproject(k, depth)
    sel = np.flatnonzero(valid.ravel())
    if len(sel) == 0:
        raise DegeneracyError("frame has no valid depth to build a pose metric")
    if len(sel) > max_points:
        sel = sel[:: int(np.ceil(len(sel) / max_points))]
    x, y, z = pts.reshape(-1, 3)[sel].T
    a, b, iz = x / z, y / z, 1.0 / z
    zero = np.zeros_like(z)
    ju = np.stack([iz, zero, -a * iz, -a * b, 1 + a * a, -b], axis=1)
    jv = np.stack([zero, iz, -b * iz, -(1 + b * b), a * b, a], axis=1)
    m = (ju.T @ ju + jv.T @ jv) / len(sel)
    return m + 1e-6 * np.trace(m) / 6 * np.eye(6)


def _direction(grads, anchors, precond, depth_scale, velocity=None, momentum=0.0):
    """Preconditioned descent direction, plus ``momentum`` times the last accepted one."""
    pose = [np.zeros(6)] + [-(precond[i] @ grads.pose[i]) for i in range(1, len(precond))]
    depth = {a: -depth_scale * grads.log_depth[a] for a in anchors} if depth_scale > 0 else {}
    if velocity is not None and momentum > 0:
        # restart when the carried step points uphill
        slope = sum(g @ v for g, v in zip(grads.pose[1:], velocity[0][1:]))
        slope += sum(grads.log_depth[a] * v for a, v in velocity[1].items()).sum() if velocity[1] else 0.0
        if slope > 0:
            return pose, depth
        pose = [p + momentum * v for p, v in zip(pose, velocity[0])]
        depth = {a: d + momentum * velocity[1][a] for a, d in depth.items()}
    return pose, depth


def _step(state: WindowState, direction, scale) -> WindowState:
    pose, depth = direction
    new = WindowState(list(state.poses), list(state.depths), state.iteration + 1)
    for i in range(1, len(state.poses)):
        new.poses[i] = state.poses[i] @ Pose.exp(scale * pose[i])
    for a, d in depth.items():
        dm = state.depths[a]
        new.depths[a] = DepthMap(np.where(dm.valid, dm.data * np.exp(scale * d), dm.data), dm.valid)
    return new


def optimize_window(
    frames,
    init: WindowState,
    k: Intrinsics,
    loss_cfg: LossConfig = LossConfig(),
    opt_cfg: OptimConfig = OptimConfig(),
    anchors=None,
) -> OptimizeResult:
    """Refine ``init`` in place of a network; returns the final state and trace.

    ``anchors`` are window positions (default: every frame). The trace starts
    with the initial loss at iteration 0 and then holds one entry per accepted
    step, so its loss column is strictly decreasing.
    """
    frames = list(frames)
    if len(frames) != len(init.poses) or len(frames) != len(init.depths):
        raise InvalidArgumentError("need one pose and one depth map per frame")
    anchors = list(range(len(frames))) if anchors is None else list(anchors)
    state = WindowState([init.poses[0].copy()] + list(init.poses[1:]), list(init.depths), init.iteration)

    grads = loss_gradients(_inputs(frames, state, k, anchors), loss_cfg)
    if grads.result.degenerate:
        raise DegeneracyError("window has no valid pixels at initialization", grads.result)
    current = grads.result.loss
    if opt_cfg.pose_metric == "pixel_motion":
        # fixed for the whole run so every iteration descends the same geometry
        metric = [motion_metric(k, d) for d in state.depths]
    else:
        metric = [np.eye(6)] * len(frames)
    precond = [np.linalg.inv(m) for m in metric]
    trace = [trace_entry(state.iteration, grads.result)]
    reason = "max_iters"
    last = np.inf
    velocity = None
    for it in range(opt_cfg.max_iters):
        if grads.norm(skip_gauge=True) < opt_cfg.grad_tol:
            reason = "grad_tol"
            break
        full = opt_cfg.step_size * opt_cfg.decay**it
        # backtrack from twice the last accepted step (at most the full step);
        # if that fails, once more below where the first pass stopped, since
        # narrow valleys can need smaller steps
        first = min(full, 2.0 * last)
        starts = [first, first * 0.5 ** (opt_cfg.max_backtracks + 1)]
        # the momentum direction first; the plain one if that cannot descend
        dirs = [_direction(grads, anchors, precond, opt_cfg.depth_lr_scale, velocity, opt_cfg.momentum)]
        if velocity is not None and opt_cfg.momentum > 0:
            dirs.append(_direction(grads, anchors, precond, opt_cfg.depth_lr_scale))
        accepted = None
        for direction in dirs:
            for scale in starts:
                for _ in range(opt_cfg.max_backtracks + 1):
                    cand = _step(state, direction, scale)
                    res = total_loss(_inputs(frames, cand, k, anchors), loss_cfg)
                    if not res.degenerate and res.loss < current:
                        accepted, last = cand, scale
                        velocity = direction
                        break
                    scale *= 0.5
                if accepted is not None:
                    break
            if accepted is not None:
                break
        if accepted is None:
            reason = "no_descent"
            break
        state = accepted
        grads = loss_gradients(_inputs(frames, state, k, anchors), loss_cfg)
        current = grads.result.loss
        trace.append(trace_entry(state.iteration, grads.result))
        if len(trace) > STALL_STEPS and trace[-1 - STALL_STEPS].loss - current <= opt_cfg.loss_tol * current:
            reason = "stalled"
            break
    log.debug("window optimized: %d steps, loss %.6g (%s)", len(trace) - 1, current, reason)
    return OptimizeResult(state, trace, reason)


def trace_to_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "loss", "photo", "geo", "smooth", "valid_fraction"])
    for e in trace:
        w.writerow([e.iteration] + [repr(float(x)) for x in (e.loss, e.photo, e.geo, e.smooth, e.valid_fraction)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Initialization


def init_state(
    frames,
    k: Intrinsics,
    strategy: str = "constant",
    *,
    depth_guess: float = 10.0,
    forward_step: float = 0.0,
    gt_poses=None,
    gt_depths=None,
    pose_noise=(0.0, 0.0),
    depth_noise: float = 0.0,
    rng=None,
    path=None,
) -> WindowState:
    """Starting point for :func:`optimize_window`.

    ``constant``: every depth equals ``depth_guess``; frame ``i`` sits
    ``i * forward_step`` meters along the optical axis (identity poses for the
    default 0, which leaves every pixel masked: a zero-motion warp never beats
    the identity reconstruction).
    ``perturbed``: ground truth (test use) with each non-gauge pose moved by a
    random twist of ``pose_noise = (meters, degrees)`` norms and depths scaled
    by ``exp(N(0, depth_noise))``. ``file``: read with :func:`read_state`.
    """
    n = len(frames)
    h, w = k.shape
    if strategy == "constant":
        poses = [Pose(np.eye(3), np.array([0.0, 0.0, forward_step * i])) for i in range(n)]
        return WindowState(poses, [DepthMap(np.full((h, w), float(depth_guess))) for _ in range(n)])
    if strategy == "perturbed":
        if gt_poses is None or gt_depths is None:
            raise InvalidArgumentError("perturbed init needs ground-truth poses and depths")
        rng = np.random.default_rng(rng)
        ref = gt_poses[0].inverse()
        poses = [Pose()]
        for p in gt_poses[1:]:
            local = ref @ p
            poses.append(local @ Pose.exp(_random_twist(rng, *pose_noise)))
        depths = []
        for d in gt_depths:
            d = d if isinstance(d, DepthMap) else DepthMap(d)
            if depth_noise > 0:
                noise = np.exp(rng.normal(scale=depth_noise, size=d.shape))
                d = DepthMap(np.where(d.valid, d.data * noise, 0.0), d.valid)
            else:
                d = DepthMap(d.data.copy(), d.valid.copy())
            depths.append(d)
        return WindowState(poses, depths)
    if strategy == "file":
        if path is None:
            raise InvalidArgumentError("file init needs a path")
        return read_state(path)
    raise InvalidArgumentError(f"unknown init strategy {strategy!r}")


def _random_twist(rng, trans_m, rot_deg):
    v = rng.normal(size=3)
    w = rng.normal(size=3)
    v *= trans_m / np.linalg.norm(v)
    w *= np.deg2rad(rot_deg) / np.linalg.norm(w)
    return np.r_[v, w]


def write_state(directory, state: WindowState) -> None:
    """Lossless state dump: poses at 17 significant digits plus ``.npy`` depths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [" ".join(format(x, ".17g") for x in p.matrix[:3].ravel()) for p in state.poses]
    (directory / "poses.txt").write_text("\n".join(lines) + "\n")
    (directory / "iteration.txt").write_text(f"{state.iteration}\n")
    for i, d in enumerate(state.depths):
        np.save(directory / f"depth_{i:03d}.npy", d.data)
        np.save(directory / f"valid_{i:03d}.npy", d.valid)


def read_state(directory) -> WindowState:
    from .trajectory import parse_pose_lines

    directory = Path(directory)
    try:
        poses = parse_pose_lines((directory / "poses.txt").read_text(), path=directory / "poses.txt")
        iteration = int((directory / "iteration.txt").read_text().strip())
        depths = [
            DepthMap(np.load(directory / f"depth_{i:03d}.npy"), np.load(directory / f"valid_{i:03d}.npy"))
            for i in range(len(poses))
        ]
    except FileNotFoundError as exc:
        raise OSError(f"incomplete state directory {directory}: {exc}") from exc
    return WindowState(poses, depths, iteration)
