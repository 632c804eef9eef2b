"""Sequence-level run: windows -> per-window optimization -> chaining -> metrics.

Every output file is written atomically and depends only on the inputs and the
seed, so repeated runs produce byte-identical reports.
"""

from __future__ import annotations

import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import DegeneracyError, InvalidArgumentError
from .optimize import OptimizeResult, WindowState, trace_entry, init_state, optimize_window, trace_to_csv
from .sources import SequenceSource
from .trajectory import Trajectory, atomic_write_text, ate, chain_windows, format_trajectory, rpe
from .windows import Window, make_windows

log = logging.getLogger(__name__)


@dataclass
class WindowReport:
    index: int
    window: Window
    result: OptimizeResult | None
    state: WindowState
    degenerate: str = ""


@dataclass
class RunReport:
    trajectory: Trajectory
    windows: list
    ate: float | None = None
    rpe_trans: float | None = None
    rpe_rot: float | None = None
    gt: Trajectory | None = None
    events: list = field(default_factory=list)
    files: dict = field(default_factory=dict)

    @property
    def has_metrics(self) -> bool:
        return self.ate is not None


def worker_count(n_tasks: int) -> int:
    """Threads for window fan-out: CPU count, capped by ``GPA_THREADS``."""
    n = os.cpu_count() or 1
    cap = os.environ.get("GPA_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError as exc:
            raise InvalidArgumentError(f"GPA_THREADS must be an integer, got {cap!r}") from exc
    return max(1, min(n, n_tasks))


def sequence_windows(src: SequenceSource, cfg: RunConfig) -> list:
    """Windows over ``src`` in absolute frame ids, every frame an anchor."""
    out = []
    for w in make_windows(len(src), cfg.window):
        ids = tuple(src.frame_ids[p] for p in w.frame_ids)
        out.append(Window(ids, ids))
    return out


def _initial_state(src: SequenceSource, positions, cfg: RunConfig, index: int) -> WindowState:
    frames = [src.image(p) for p in positions]
    if cfg.init == "constant":
        return init_state(frames, src.calib, "constant", depth_guess=cfg.depth_guess, forward_step=cfg.forward_step)
    if cfg.init == "perturbed":
        if src.gt_poses is None or not src.has_depth:
            raise InvalidArgumentError("perturbed init needs ground-truth poses and depths")
        gt = src.gt_poses.as_dict()
        return init_state(
            frames,
            src.calib,
            "perturbed",
            gt_poses=[gt[src.frame_ids[p]] for p in positions],
            gt_depths=[src.depth(p) for p in positions],
            pose_noise=(cfg.pose_noise_m, cfg.pose_noise_deg),
            depth_noise=cfg.depth_noise,
            rng=np.random.SeedSequence([cfg.seed, index]),
        )
    raise InvalidArgumentError(f"init strategy {cfg.init!r} is not available for sequence runs")


def _optimize_one(src: SequenceSource, window: Window, index: int, cfg: RunConfig) -> WindowReport:
    pos_of = {f: i for i, f in enumerate(src.frame_ids)}
    positions = [pos_of[f] for f in window.frame_ids]
    init = _initial_state(src, positions, cfg, index)
    frames = [src.image(p) for p in positions]
    try:
        res = optimize_window(frames, init, src.calib, cfg.loss, cfg.optim, anchors=window.anchor_positions())
    except DegeneracyError as exc:
        log.warning("window %d degenerate: %s", index, exc)
        # one-row trace: the initial loss and valid fraction that triggered it
        diag = exc.diagnostics
        res = OptimizeResult(init, [trace_entry(init.iteration, diag)], "degenerate") if diag is not None else None
        return WindowReport(index, window, res, init, degenerate=str(exc))
    return WindowReport(index, window, res, res.state)


def run_pipeline(src: SequenceSource, cfg: RunConfig, write: bool = True) -> RunReport:
    """Optimize every window, chain them and evaluate against ground truth.

    Degenerate windows keep their initial poses; degenerate alignments fall
    back to composition. Both are listed in ``report.events``.
    """
    if cfg.resize is not None:
        src = src.resized(*cfg.resize)
    windows = sequence_windows(src, cfg)
    if src.kind == "synthetic":
        # render once up front; the frame cache is not shared safely otherwise
        for p in range(len(src)):
            src.image(p)
    n_workers = worker_count(len(windows))
    if n_workers == 1:
        reports = [_optimize_one(src, w, i, cfg) for i, w in enumerate(windows)]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            futures = [pool.submit(_optimize_one, src, w, i, cfg) for i, w in enumerate(windows)]
            reports = [f.result() for f in futures]

    events = [(r.index, f"window degenerate, initial poses kept: {r.degenerate}") for r in reports if r.degenerate]
    chain_events: list = []
    traj = chain_windows([(r.window, r.state) for r in reports], cfg.chain_mode, events=chain_events)
    events.extend(chain_events)
    events.sort(key=lambda e: e[0])

    report = RunReport(traj, reports, events=events)
    if src.gt_poses is not None:
        gt = src.gt_poses.subset(src.frame_ids)
        report.gt = gt
        report.ate = ate(traj, gt)
        report.rpe_trans, report.rpe_rot = rpe(traj, gt)
    if write:
        write_report(report, cfg.output_dir, name="direct-window")
    return report


# ---------------------------------------------------------------------------
# Report files


def metrics_csv(report: RunReport) -> str:
    def fmt(x):
        return "unavailable" if x is None else repr(float(x))

    rows = [
        "frames,windows,degenerate_windows,ate_m,rpe_trans_m,rpe_rot_deg",
        ",".join(
            [
                str(len(report.trajectory)),
                str(len(report.windows)),
                str(sum(bool(w.degenerate) for w in report.windows)),
                fmt(report.ate),
                fmt(report.rpe_trans),
                fmt(report.rpe_rot),
            ]
        ),
    ]
    return "\n".join(rows) + "\n"


def metrics_table(report: RunReport, name: str = "estimate") -> str:
    """Fixed-width text table: method, ATE (m), RPE (m), RPE (deg)."""
    def fmt(x, digits):
        return "n/a" if x is None else f"{x:.{digits}f}"

    head = f"{'Method':<16}{'ATE (m)':>12}{'RPE (m)':>12}{'RPE (deg)':>12}"
    row = f"{name:<16}{fmt(report.ate, 3):>12}{fmt(report.rpe_trans, 3):>12}{fmt(report.rpe_rot, 3):>12}"
    lines = [head, "-" * len(head), row]
    for idx, msg in report.events:
        lines.append(f"note: window {idx}: {msg}")
    return "\n".join(lines) + "\n"


def trajectory_svg(est: Trajectory, gt: Trajectory | None = None, size: int = 480, margin: int = 20) -> str:
    """Top-down (x, z) polylines of the estimate and, if given, ground truth.

    The estimate is drawn after a similarity alignment to ground truth so the
    two curves share a frame.
    """
    from .trajectory import umeyama_align

    curves = []
    est_c = est.centers()
    if gt is not None:
        common = sorted(set(est.frame_ids) & set(gt.frame_ids))
        e = est.subset(common).centers()
        g = gt.subset(common).centers()
        A = umeyama_align(e, g, with_scale=True, allow_degenerate=True)
        est_c = A.apply(e)
        curves.append(("ground truth", "#1f77b4", g))
    curves.append(("estimate", "#d62728", est_c))
    pts = np.concatenate([c[:, [0, 2]] for _, _, c in curves])
    lo = pts.min(axis=0)
    span = max(float((pts.max(axis=0) - lo).max()), 1e-9)
    scale = (size - 2 * margin) / span

    def xy(p):
        # x to the right, z up
        return margin + (p[0] - lo[0]) * scale, size - margin - (p[2] - lo[1]) * scale

    out = io.StringIO()
    out.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">\n')
    out.write(f'<rect width="{size}" height="{size}" fill="white"/>\n')
    for i, (label, color, c) in enumerate(curves):
        path = " ".join("{:.2f},{:.2f}".format(*xy(p)) for p in c)
        out.write(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>\n')
        out.write(f'<text x="{margin}" y="{margin + 14 * i}" fill="{color}" font-size="12">{label}</text>\n')
    out.write("</svg>\n")
    return out.getvalue()


def write_report(report: RunReport, output_dir, name: str = "estimate") -> dict:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}

    def put(fname, text):
        atomic_write_text(out / fname, text)
        files[fname] = out / fname

    put("trajectory.txt", format_trajectory(report.trajectory))
    for w in report.windows:
        if w.result is not None:
            put(f"trace_{w.index:03d}.csv", trace_to_csv(w.result.trace))
    put("metrics.csv", metrics_csv(report))
    put("metrics.txt", metrics_table(report, name))
    put("trajectory.svg", trajectory_svg(report.trajectory, report.gt))
    report.files = files
    return files
