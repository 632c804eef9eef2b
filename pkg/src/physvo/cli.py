"""Command line: ``physvo {synth,optimize,chain,eval,gradcheck,run}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 gradient check
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import DegeneracyError, InvalidArgumentError, ParseError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("physvo")


class _UsageError(Exception):
    pass


def _floats(n):
    def conv(text):
        vals = [float(x) for x in text.replace(",", " ").split()]
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} numbers, got {text!r}")
        return np.array(vals)

    return conv


def _add_config_args(p):
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one configuration key (repeatable), e.g. --set window.len=5",
    )
    p.add_argument("--seed", type=int, help="run seed (overrides the config)")
    p.add_argument("--resize", type=int, nargs=2, metavar=("W", "H"), help="resize frames before processing")
    p.add_argument("--init", choices=("constant", "perturbed"), help="initialization strategy")


def _run_config(args):
    from .config import RunConfig, load_config

    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise _UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.resize is not None:
        overrides["resize"] = f"{args.resize[0]} {args.resize[1]}"
    if args.init is not None:
        overrides["init.strategy"] = args.init
    if getattr(args, "out", None) is not None:
        overrides["output_dir"] = str(args.out)
    try:
        return cfg.with_overrides(overrides) if overrides else cfg
    except ParseError as exc:
        raise _UsageError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="physvo", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic sequence in the KITTI layout")
    p.add_argument("--scene", type=Path, help="scene description file (key = value)")
    p.add_argument("--preset", choices=("wall", "corridor"), default="corridor")
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--size", type=int, nargs=2, default=(96, 72), metavar=("W", "H"))
    p.add_argument("--focal", type=float, help="focal length in pixels (default 0.75 W)")
    p.add_argument("--step", type=_floats(3), default=np.array([0.05, 0.0, 0.3]), help="per-frame translation 'x y z'")
    p.add_argument("--turn", type=_floats(3), default=np.array([0.0, 0.01, 0.0]), help="per-frame rotation 'rx ry rz' (rad)")
    p.add_argument("--out", type=Path, required=True, help="dataset root to write")
    p.add_argument("--seq", default="00")

    p = sub.add_parser("optimize", help="optimize a single window and write its trace")
    p.add_argument("--data", type=Path, required=True, help="dataset root (KITTI layout)")
    p.add_argument("--seq", default="00")
    p.add_argument("--start", type=int, default=0, help="position of the window's first frame")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _add_config_args(p)

    p = sub.add_parser("chain", help="chain per-window pose files into one trajectory")
    p.add_argument("windows", nargs="+", type=Path, help="window pose files in window order")
    p.add_argument("--starts", help="comma-separated first frame id of each window (default: i * stride)")
    p.add_argument("--stride", type=int, help="window stride in frames (default from config)")
    p.add_argument("--mode", choices=("rigid", "similarity"), help="chaining mode (default from config)")
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--config", type=Path)

    p = sub.add_parser("eval", help="ATE and RPE of an estimated pose file against ground truth")
    p.add_argument("estimate", type=Path)
    p.add_argument("ground_truth", type=Path)
    p.add_argument("--align", choices=("rigid", "similarity"), default="similarity")
    p.add_argument("--delta", type=int, default=1, help="frame offset for RPE")

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--configs", type=int, default=50, help="number of random windows")
    p.add_argument("--tol", type=float, default=1e-3)

    p = sub.add_parser("run", help="full pipeline: windows, optimization, chaining, metrics")
    p.add_argument("--data", type=Path, required=True, help="dataset root (KITTI layout)")
    p.add_argument("--seq", default="00")
    p.add_argument("--frames", type=int, nargs=2, metavar=("START", "END"), help="frame id range [START, END)")
    p.add_argument("--color", action="store_true", help="use image_2 in color")
    p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    _add_config_args(p)
    return ap


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    from .geometry import Intrinsics, Pose
    from .sources import synthetic_source, write_sequence
    from .synth import corridor_scene, load_scene, save_scene, textured_wall_scene
    from .trajectory import Trajectory

    if args.frames < 2:
        raise _UsageError("--frames must be >= 2")
    w, h = args.size
    f = args.focal if args.focal is not None else 0.75 * w
    k = Intrinsics(f, f, (w - 1) / 2, (h - 1) / 2, w, h)
    if args.scene is not None:
        scene = load_scene(args.scene)
    else:
        scene = textured_wall_scene() if args.preset == "wall" else corridor_scene()
    poses = [Pose.exp(np.r_[args.step * i, args.turn * i]) for i in range(args.frames)]
    src = synthetic_source(scene, Trajectory.from_poses(poses), k)
    seq = write_sequence(args.out, args.seq, src)
    save_scene(args.out / "scene.txt", scene)
    print(f"wrote {args.frames} frames to {seq}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    from .optimize import trace_to_csv, write_state
    from .pipeline import _optimize_one
    from .sources import load_kitti_sequence
    from .trajectory import atomic_write_text
    from .windows import Window

    cfg = _run_config(args)
    src = load_kitti_sequence(args.data, args.seq, resize=cfg.resize)
    S = cfg.window.window_len
    if not 0 <= args.start <= len(src) - S:
        raise _UsageError(f"--start must lie in [0, {len(src) - S}] for {len(src)} frames and S = {S}")
    ids = tuple(src.frame_ids[args.start : args.start + S])
    rep = _optimize_one(src, Window(ids, ids), 0, cfg)
    if rep.degenerate:
        raise DegeneracyError(rep.degenerate)
    out = Path(args.out)
    atomic_write_text(out / "trace.csv", trace_to_csv(rep.result.trace))
    write_state(out / "state", rep.state)
    last = rep.result.trace[-1]
    print(f"{len(rep.result.trace) - 1} steps ({rep.result.converged}), loss {rep.result.trace[0].loss:.6g} -> {last.loss:.6g}")
    return EXIT_OK


def cmd_chain(args) -> int:
    from .config import RunConfig, load_config
    from .optimize import WindowState
    from .trajectory import chain_windows, parse_pose_lines, write_trajectory
    from .windows import Window

    cfg = load_config(args.config) if args.config else RunConfig()
    stride = args.stride or cfg.window.stride
    mode = args.mode or cfg.chain_mode
    pose_sets = [parse_pose_lines(p.read_text(), path=p) for p in args.windows]
    if args.starts:
        starts = [int(s) for s in args.starts.split(",")]
        if len(starts) != len(pose_sets):
            raise _UsageError("--starts needs one entry per window file")
    else:
        starts = [i * stride for i in range(len(pose_sets))]
    results = [(Window(tuple(range(s, s + len(ps)))), WindowState(ps, [None] * len(ps))) for s, ps in zip(starts, pose_sets)]
    events: list = []
    traj = chain_windows(results, mode, events=events)
    for idx, msg in events:
        print(f"window {idx}: {msg}", file=sys.stderr)
    write_trajectory(args.output, traj)
    print(f"chained {len(results)} windows into {len(traj)} frames")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trajectory import ate, read_trajectory, rpe

    est = read_trajectory(args.estimate)
    gt = read_trajectory(args.ground_truth)
    a = ate(est, gt, args.align)
    rt, rr = rpe(est, gt, args.delta)
    print(f"ATE {a:.3f} m")
    print(f"RPE {rt:.3f} m {rr:.3f} deg")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    rep = run_suite(n_configs=args.configs, seed=args.seed)
    rep.tol = args.tol
    print(
        f"compared {len(rep.compared)} components, skipped {rep.n_skipped} at kinks, "
        f"max relative error {rep.max_rel_error:.3g} (tol {args.tol:g})"
    )
    print("PASS" if rep.passed else "FAIL")
    return EXIT_OK if rep.passed else EXIT_CHECK


def cmd_run(args) -> int:
    from .pipeline import run_pipeline
    from .sources import load_kitti_sequence

    cfg = _run_config(args)
    src = load_kitti_sequence(args.data, args.seq, color=args.color or cfg.color, frame_range=args.frames)
    report = run_pipeline(src, cfg)
    for idx, msg in report.events:
        print(f"window {idx}: {msg}", file=sys.stderr)
    print((Path(cfg.output_dir) / "metrics.txt").read_text(), end="")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "optimize": cmd_optimize,
    "chain": cmd_chain,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "run": cmd_run,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: --help exits 0, usage errors 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"physvo {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ParseError, InvalidArgumentError, DegeneracyError) as exc:
        print(f"physvo {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
