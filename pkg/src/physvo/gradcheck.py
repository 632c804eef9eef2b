"""Central finite-difference verification of the analytic window gradients.

A component is compared only at a smooth point: the objective evaluated at
``x +- step`` must sit on the same smooth piece as ``x`` (same source
selection, masks, bilinear cells and absolute-value signs). Elsewhere the
central difference straddles a kink and measures nothing useful, so those
components are reported as skipped rather than compared.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import DepthMap, Intrinsics, Pose
from .losses import (
    LossConfig,
    WindowInputs,
    loss_gradients,
    piece_signature,
    same_piece,
    total_loss,
    with_poses_and_depths,
)

log = logging.getLogger(__name__)


def relative_error(analytic, numeric, floor=1e-8) -> float:
    """``|a - f| / max(|a|, |f|, floor)``; ``floor`` sits well above FD round-off."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class ComponentCheck:
    kind: str  # "twist" or "log_depth"
    frame: int
    index: tuple
    analytic: float
    numeric: float
    smooth: bool

    @property
    def rel_error(self) -> float:
        return relative_error(self.analytic, self.numeric)


@dataclass
class GradCheckReport:
    checks: list = field(default_factory=list)
    tol: float = 1e-3

    @property
    def compared(self):
        return [c for c in self.checks if c.smooth]

    @property
    def n_skipped(self) -> int:
        return sum(not c.smooth for c in self.checks)

    @property
    def max_rel_error(self) -> float:
        return max((c.rel_error for c in self.compared), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.compared) and self.max_rel_error <= self.tol

    def merge(self, other: GradCheckReport) -> GradCheckReport:
        return GradCheckReport(self.checks + other.checks, self.tol)


def _structure(inputs, cfg):
    res = total_loss(inputs, cfg)
    sig = piece_signature(inputs, cfg)
    for d in res.anchors:
        sig.extend([d.selection.source_index, d.automask.keep, d.valid])
    return res.loss, sig


def check_gradients(
    inputs: WindowInputs,
    cfg: LossConfig = LossConfig(),
    step: float = 1e-5,
    depth_probes: int = 20,
    rng=None,
    tol: float = 1e-3,
) -> GradCheckReport:
    """Compare every pose-twist component and ``depth_probes`` random anchor
    log-depth pixels against central differences of the full objective."""
    rng = np.random.default_rng(rng)
    grads = loss_gradients(inputs, cfg)
    _, base_sig = _structure(inputs, cfg)
    report = GradCheckReport(tol=tol)

    def probe(make):
        values = []
        smooth = True
        for sgn in (1.0, -1.0):
            shifted = make(sgn * step)
            loss, sig = _structure(shifted, cfg)
            values.append(loss)
            smooth &= same_piece(sig, base_sig)
        return (values[0] - values[1]) / (2 * step), smooth

    for i in range(len(inputs.poses)):
        for j in range(6):

            def make(h, i=i, j=j):
                e = np.zeros(6)
                e[j] = h
                poses = list(inputs.poses)
                poses[i] = inputs.poses[i] @ Pose.exp(e)
                return with_poses_and_depths(inputs, poses=poses)

            num, smooth = probe(make)
            report.checks.append(ComponentCheck("twist", i, (j,), float(grads.pose[i, j]), num, smooth))

    anchors = list(inputs.anchors)
    for _ in range(depth_probes):
        t = anchors[rng.integers(len(anchors))]
        valid = np.argwhere(inputs.depths[t].valid)
        r, c = valid[rng.integers(len(valid))]

        def make(h, t=t, r=r, c=c):
            depths = list(inputs.depths)
            d = depths[t].data.copy()
            d[r, c] *= np.exp(h)
            depths[t] = DepthMap(d, depths[t].valid)
            return with_poses_and_depths(inputs, depths=depths)

        num, smooth = probe(make)
        report.checks.append(
            ComponentCheck("log_depth", t, (int(r), int(c)), float(grads.log_depth[t][r, c]), num, smooth)
        )
    log.debug("gradcheck: %d compared, %d skipped, max rel err %.3g",
              len(report.compared), report.n_skipped, report.max_rel_error)
    return report


def random_window(rng, n_frames=3, width=20, height=16, fov_focal=12.0) -> WindowInputs:
    """Random smooth test configuration on a rendered scene.

    Camera poses are perturbed by random twists and every frame's depth by
    smooth multiplicative noise, so the point is generic (away from the
    optimum) but the objective stays well conditioned.
    """
    from .synth import corridor_scene, render

    rng = np.random.default_rng(rng)
    k = Intrinsics(fov_focal, fov_focal, (width - 1) / 2, (height - 1) / 2, width, height)
    scene = corridor_scene(seed=int(rng.integers(1000)), scale=float(rng.uniform(1.0, 2.0)))
    step = np.r_[rng.uniform(-0.3, 0.3), rng.uniform(-0.1, 0.1), rng.uniform(0.2, 0.5)]
    turn = rng.normal(size=3) * 0.02
    start = Pose.exp(np.r_[rng.uniform(-0.5, 0.5, 2), 0.0, rng.normal(size=3) * 0.05])
    world = [start @ Pose.exp(np.r_[step * i, turn * i]) for i in range(n_frames)]
    frames = [render(scene, p, k) for p in world]
    ref = world[0].inverse()
    local = [ref @ p for p in world]
    poses = [local[0]] + [
        p @ Pose.exp(np.r_[rng.normal(size=3) * 0.05, rng.normal(size=3) * 0.01]) for p in local[1:]
    ]
    depths = []
    for f in frames:
        coarse = rng.normal(size=(3, 3)) * 0.05
        yy = np.linspace(0, 2, height)[:, None]
        xx = np.linspace(0, 2, width)[None, :]
        noise = _bilerp(coarse, yy, xx)
        depths.append(DepthMap(np.where(f.depth.valid, f.depth.data * np.exp(noise), 0.0), f.depth.valid))
    return WindowInputs([f.image for f in frames], depths, poses, k, list(range(n_frames)))


def _bilerp(grid, yy, xx):
    i = np.clip(np.floor(yy).astype(int), 0, grid.shape[0] - 2)
    j = np.clip(np.floor(xx).astype(int), 0, grid.shape[1] - 2)
    a = yy - i
    b = xx - j
    return (
        grid[i, j] * (1 - a) * (1 - b)
        + grid[i + 1, j] * a * (1 - b)
        + grid[i, j + 1] * (1 - a) * b
        + grid[i + 1, j + 1] * a * b
    )


def run_suite(n_configs=50, seed=0, cfg: LossConfig = LossConfig(), **window_kw) -> GradCheckReport:
    """Gradient check over ``n_configs`` random windows."""
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for n in range(n_configs):
        inputs = random_window(rng, **window_kw)
        rep = check_gradients(inputs, cfg, rng=rng)
        log.info("config %d: compared %d, skipped %d, max rel err %.3g",
                 n, len(rep.compared), rep.n_skipped, rep.max_rel_error)
        report = report.merge(rep)
    return report
