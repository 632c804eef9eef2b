"""Global trajectories: window chaining, Umeyama alignment, ATE and RPE.

Poses in a :class:`Trajectory` are camera-to-world. Pose files use the KITTI
odometry layout: one frame per line, 12 values of the row-major 3x4 ``[R|t]``.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegeneracyError, InvalidArgumentError, ParseError
from .geometry import Pose, rotation_angle


@dataclass
class Trajectory:
    frame_ids: list = field(default_factory=list)
    poses: list = field(default_factory=list)

    def __post_init__(self):
        self.frame_ids = [int(f) for f in self.frame_ids]
        if len(self.frame_ids) != len(self.poses):
            raise InvalidArgumentError("one pose per frame id required")
        if any(b <= a for a, b in zip(self.frame_ids, self.frame_ids[1:])):
            raise InvalidArgumentError("frame ids must increase strictly")

    @classmethod
    def from_poses(cls, poses, start=0) -> Trajectory:
        return cls(list(range(start, start + len(poses))), list(poses))

    def __len__(self):
        return len(self.poses)

    def as_dict(self) -> dict:
        return dict(zip(self.frame_ids, self.poses))

    def centers(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def subset(self, ids) -> Trajectory:
        d = self.as_dict()
        ids = sorted(ids)
        return Trajectory(ids, [d[i] for i in ids])

    def transformed(self, transform) -> Trajectory:
        """Apply an :class:`AlignTransform` (or a :class:`Pose`) on the world side."""
        if isinstance(transform, Pose):
            return Trajectory(self.frame_ids, [transform @ p for p in self.poses])
        return Trajectory(self.frame_ids, [transform.apply_pose(p) for p in self.poses])


@dataclass
class AlignTransform:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    def apply_pose(self, pose: Pose) -> Pose:
        """Map a camera-to-world pose; scale acts on the camera center only."""
        return Pose(self.rotation @ pose.rotation, self.apply(pose.translation))


def umeyama_align(src, dst, with_scale=False, allow_degenerate=False) -> AlignTransform:
    """Least-squares ``s, R, t`` minimizing ``sum |s R src + t - dst|^2``.

    Collinear or coincident sources make the rotation (and scale) ambiguous and
    raise :class:`DegeneracyError` unless ``allow_degenerate`` is set, in which
    case one minimizer is returned (a single pair gives a pure translation).
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst) or len(src) == 0:
        raise InvalidArgumentError(f"need matching non-empty point sets, got {len(src)} and {len(dst)}")
    n = len(src)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False) if n > 1 else np.zeros(3)
    degenerate = n < 3 or sv[0] <= 1e-12 or sv[1] <= 1e-9 * sv[0]
    if degenerate and not allow_degenerate:
        raise DegeneracyError(f"degenerate point configuration ({n} points, singular values {sv})")
    if n == 1 or sv[0] <= 1e-12:
        return AlignTransform(np.eye(3), mu_d - mu_s, 1.0)

    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = 1.0
    if with_scale:
        var_s = (xs * xs).sum() / n
        scale = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_d - scale * R @ mu_s
    return AlignTransform(R, t, scale)


def _compose_through(shared, local, glob, with_scale) -> AlignTransform:
    f = shared[-1]
    R = glob[f].rotation @ local[f].rotation.T
    s = 1.0
    if with_scale:
        if len(shared) < 2:
            raise DegeneracyError("similarity chaining through one shared frame cannot recover scale")
        a, b = shared[0], shared[-1]
        dl = np.linalg.norm(local[b].translation - local[a].translation)
        dg = np.linalg.norm(glob[b].translation - glob[a].translation)
        if dl < 1e-12 or dg < 1e-12:
            raise DegeneracyError("shared frames coincide; scale is unobservable")
        s = dg / dl
    t = glob[f].translation - s * R @ local[f].translation
    return AlignTransform(R, t, s)


def chain_transform(shared, local: dict, glob: dict, mode="similarity", events=None) -> AlignTransform:
    """Transform taking window-local poses onto the chained global ones.

    Umeyama over the shared camera centers when there are at least three
    non-collinear ones; otherwise composition through the latest shared frame
    (with scale from the spread of the shared centers in similarity mode).
    Fallbacks taken because of degenerate geometry are appended to ``events``.
    """
    if mode not in ("rigid", "similarity"):
        raise InvalidArgumentError(f"unknown chain mode {mode!r}")
    with_scale = mode == "similarity"
    if len(shared) >= 3:
        try:
            return umeyama_align(
                [local[f].translation for f in shared], [glob[f].translation for f in shared], with_scale
            )
        except DegeneracyError as exc:
            if events is not None:
                events.append(f"shared centers degenerate ({exc}); composed through frame {shared[-1]}")
    try:
        return _compose_through(shared, local, glob, with_scale)
    except DegeneracyError as exc:
        if events is None:
            raise
        events.append(f"{exc}; composed rigidly through frame {shared[-1]}")
        return _compose_through(shared, local, glob, False)


def chain_windows(window_results, mode="similarity", events=None) -> Trajectory:
    """Stitch per-window poses into one trajectory in the gauge of window 0.

    ``window_results`` is a sequence of ``(Window, state)`` pairs where
    ``state.poses[i]`` belongs to ``window.frame_ids[i]``. Frames already placed
    keep their pose; only new frames of each window are appended. With an
    ``events`` list, degenerate alignments fall back to rigid composition and
    are reported there as ``(window index, message)`` instead of raising.
    """
    window_results = list(window_results)
    if not window_results:
        raise InvalidArgumentError("nothing to chain")
    glob: dict = {}
    for n, (window, state) in enumerate(window_results):
        local = dict(zip(window.frame_ids, state.poses))
        if n == 0:
            glob.update({f: p.copy() for f, p in local.items()})
            continue
        shared = [f for f in window.frame_ids if f in glob]
        if not shared:
            raise InvalidArgumentError(f"window {n} shares no frame with the trajectory so far")
        msgs = [] if events is not None else None
        A = chain_transform(shared, local, glob, mode, msgs)
        if msgs:
            events.extend((n, m) for m in msgs)
        for f in window.frame_ids:
            if f not in glob:
                glob[f] = A.apply_pose(local[f])
    ids = sorted(glob)
    return Trajectory(ids, [glob[f] for f in ids])


# ---------------------------------------------------------------------------
# Metrics


def _common(est: Trajectory, gt: Trajectory):
    ids = sorted(set(est.frame_ids) & set(gt.frame_ids))
    if not ids:
        raise InvalidArgumentError("trajectories share no frame ids")
    return est.subset(ids), gt.subset(ids)


def ate(est: Trajectory, gt: Trajectory, align_mode="similarity") -> float:
    """RMSE of camera-center residuals after one global Umeyama alignment (meters)."""
    if align_mode not in ("rigid", "similarity"):
        raise InvalidArgumentError(f"unknown alignment mode {align_mode!r}")
    e, g = _common(est, gt)
    A = umeyama_align(e.centers(), g.centers(), align_mode == "similarity", allow_degenerate=True)
    res = A.apply(e.centers()) - g.centers()
    return float(np.sqrt((res * res).sum(axis=1).mean()))


def rpe(est: Trajectory, gt: Trajectory, delta: int = 1) -> tuple:
    """Relative pose error over frame pairs ``(f, f + delta)``.

    Returns ``(translation RMSE in meters, rotation RMSE in degrees)``.
    """
    if delta < 1:
        raise InvalidArgumentError("delta must be >= 1")
    e, g = _common(est, gt)
    ed, gd = e.as_dict(), g.as_dict()
    pairs = [f for f in e.frame_ids if f + delta in ed]
    if not pairs:
        raise InvalidArgumentError(f"need at least {delta + 1} frames spaced by delta={delta}")
    t_sq = []
    r_sq = []
    for f in pairs:
        rel_g = gd[f].inverse() @ gd[f + delta]
        rel_e = ed[f].inverse() @ ed[f + delta]
        err = rel_g.inverse() @ rel_e
        t_sq.append(float(err.translation @ err.translation))
        r_sq.append(np.degrees(rotation_angle(err.rotation)) ** 2)
    return float(np.sqrt(np.mean(t_sq))), float(np.sqrt(np.mean(r_sq)))


# ---------------------------------------------------------------------------
# KITTI pose files


def _orthonormalize(R):
    if np.abs(R.T @ R - np.eye(3)).max() < 1e-12:
        return R  # keeps parse/write/parse a fixed point
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def parse_pose_lines(text: str, path=None) -> list:
    """Parse KITTI pose lines; rotations are projected onto SO(3).

    The projection only absorbs the rounding of the decimal text.
    """
    poses = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 12:
            raise ParseError(f"expected 12 values, found {len(parts)}", path=path, line=lineno)
        try:
            vals = np.array([float(x) for x in parts]).reshape(3, 4)
        except ValueError as exc:
            raise ParseError(f"non-numeric value: {exc}", path=path, line=lineno) from exc
        if not np.all(np.isfinite(vals)):
            raise ParseError("non-finite value", path=path, line=lineno)
        R = vals[:, :3]
        if abs(np.linalg.det(R) - 1.0) > 1e-3 or not np.allclose(R.T @ R, np.eye(3), atol=1e-3):
            raise ParseError("rotation block is not a rotation", path=path, line=lineno)
        poses.append(Pose(_orthonormalize(R), vals[:, 3]))
    return poses


def read_trajectory(path, start=0) -> Trajectory:
    """Read a KITTI pose file; line ``i`` becomes frame ``start + i``."""
    path = Path(path)
    return Trajectory.from_poses(parse_pose_lines(path.read_text(), path=path), start=start)


def format_trajectory(traj: Trajectory) -> str:
    lines = [" ".join(format(x, ".16e") for x in p.matrix[:3].ravel()) for p in traj.poses]
    return "\n".join(lines) + "\n"


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_trajectory(path, traj: Trajectory) -> None:
    """Write poses in frame order (17 significant digits, lossless for float64)."""
    atomic_write_text(path, format_trajectory(traj))
