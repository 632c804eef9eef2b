"""Frame sources: KITTI odometry directories and rendered synthetic scenes.

KITTI layout::

    <root>/sequences/<id>/calib.txt
    <root>/sequences/<id>/image_0/000000.png   (or image_2/ for color)
    <root>/poses/<id>.txt                       (optional ground truth)

Synthetic sequences written by :func:`write_sequence` use the same layout plus
``sequences/<id>/depth/000000.depth`` files holding the rendered depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, ParseError
from .geometry import DepthMap, Intrinsics, rescale_intrinsics
from .photometric import as_image, load_image, save_image
from .trajectory import Trajectory, read_trajectory, write_trajectory


def parse_calib(text: str, key: str = "P0", width: int = 0, height: int = 0, path=None) -> Intrinsics:
    """Intrinsics from the ``key`` projection-matrix line of a KITTI calib file.

    ``fx = P[0][0]``, ``fy = P[1][1]``, ``cx = P[0][2]``, ``cy = P[1][2]``.
    Image size is not part of the file and comes from the caller; without it
    the image is assumed centred on the principal point.
    """
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        name, sep, rest = line.partition(":")
        if not sep:
            raise ParseError(f"expected 'NAME: values', got {line.strip()!r}", path=path, line=lineno)
        if name.strip() != key:
            continue
        parts = rest.split()
        if len(parts) != 12:
            raise ParseError(f"{key} needs 12 values, found {len(parts)}", path=path, line=lineno)
        try:
            P = np.array([float(x) for x in parts]).reshape(3, 4)
        except ValueError as exc:
            raise ParseError(f"non-numeric value in {key}: {exc}", path=path, line=lineno) from exc
        try:
            w = int(width) if width > 0 else int(np.ceil(2 * P[0, 2] + 1))
            h = int(height) if height > 0 else int(np.ceil(2 * P[1, 2] + 1))
            return Intrinsics(P[0, 0], P[1, 1], P[0, 2], P[1, 2], w, h)
        except InvalidArgumentError as exc:
            raise ParseError(str(exc), path=path, line=lineno) from exc
    raise ParseError(f"no {key} line found", path=path)


def format_calib(k: Intrinsics, key: str = "P0") -> str:
    P = np.zeros((3, 4))
    P[:, :3] = k.matrix
    return f"{key}: " + " ".join(format(x, ".6e") for x in P.ravel()) + "\n"


def resize_image(img, width: int, height: int) -> np.ndarray:
    """Bilinear resize of a float image (per channel)."""
    from PIL import Image as PILImage

    img = as_image(img)
    chans = [
        np.asarray(PILImage.fromarray(img[..., c].astype(np.float32), mode="F").resize((width, height), PILImage.BILINEAR))
        for c in range(img.shape[2])
    ]
    return np.stack(chans, axis=2).astype(np.float64)


@dataclass
class SequenceSource:
    """A calibrated image sequence, optionally with ground-truth poses/depths.

    ``frame_ids`` are absolute frame numbers; trajectories use the same ids.
    For ``kind == "synthetic"`` frames are rendered on demand from ``scene``
    along ``gt_poses``.
    """

    kind: str
    calib: Intrinsics
    frame_ids: list
    gt_poses: Trajectory | None = None
    image_paths: list | None = None
    depth_paths: list | None = None
    scene: object = None
    color: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("kitti", "synthetic"):
            raise InvalidArgumentError(f"unknown source kind {self.kind!r}")
        self.frame_ids = [int(f) for f in self.frame_ids]
        if len(self.frame_ids) < 2:
            raise InvalidArgumentError("a sequence needs at least two frames")
        if self.kind == "synthetic" and (self.scene is None or self.gt_poses is None):
            raise InvalidArgumentError("synthetic source needs a scene and poses")

    def __len__(self):
        return len(self.frame_ids)

    @property
    def frame_range(self) -> tuple:
        return self.frame_ids[0], self.frame_ids[-1] + 1

    @property
    def has_depth(self) -> bool:
        return self.kind == "synthetic" or self.depth_paths is not None

    def resized(self, width: int, height: int) -> SequenceSource:
        """Same frames at another resolution; intrinsics follow the resize."""
        return replace(self, calib=rescale_intrinsics(self.calib, width, height), _cache={})

    def subset(self, start: int, stop: int) -> SequenceSource:
        """Frames with ``start <= position < stop`` (positions, not ids)."""
        idx = slice(start, stop)
        ids = self.frame_ids[idx]
        gt = self.gt_poses.subset([f for f in ids if f in self.gt_poses.as_dict()]) if self.gt_poses else None
        return replace(
            self,
            frame_ids=ids,
            gt_poses=gt if self.kind == "kitti" else self.gt_poses,
            image_paths=self.image_paths[idx] if self.image_paths else None,
            depth_paths=self.depth_paths[idx] if self.depth_paths else None,
            _cache={},
        )

    def _render(self, fid):
        key = ("render", fid)
        if key not in self._cache:
            from .synth import render

            self._cache[key] = render(self.scene, self.gt_poses.as_dict()[fid], self.calib, frame_t=float(fid))
        return self._cache[key]

    def image(self, pos: int) -> np.ndarray:
        fid = self.frame_ids[pos]
        if self.kind == "synthetic":
            return self._render(fid).image
        img = load_image(self.image_paths[pos], grayscale=not self.color)
        h, w = img.shape[:2]
        if (w, h) != (self.calib.width, self.calib.height):
            img = resize_image(img, self.calib.width, self.calib.height)
        return img

    def depth(self, pos: int) -> DepthMap:
        if self.kind == "synthetic":
            return self._render(self.frame_ids[pos]).depth
        if self.depth_paths is None:
            raise InvalidArgumentError("this sequence has no depth files")
        from .synth import read_depth

        d = read_depth(self.depth_paths[pos])
        h, w = d.shape
        if (w, h) != (self.calib.width, self.calib.height):
            # nearest neighbour keeps depth edges sharp
            rows = np.minimum((np.arange(self.calib.height) + 0.5) * h / self.calib.height, h - 1).astype(int)
            cols = np.minimum((np.arange(self.calib.width) + 0.5) * w / self.calib.width, w - 1).astype(int)
            d = DepthMap(d.data[np.ix_(rows, cols)], d.valid[np.ix_(rows, cols)])
        return d


def load_kitti_sequence(root, seq_id: str, color: bool = False, resize=None, frame_range=None) -> SequenceSource:
    """Open ``<root>/sequences/<seq_id>``; see the module docstring for layout.

    ``color`` reads ``image_2`` with ``P2``; otherwise ``image_0`` with ``P0``
    (falling back to ``image_2`` averaged to gray). ``resize = (W, H)``.
    """
    root = Path(root)
    seq = root / "sequences" / seq_id
    calib_path = seq / "calib.txt"
    if not calib_path.is_file():
        raise OSError(f"missing calibration file {calib_path}")
    img_dir, key = (seq / "image_2", "P2") if color else (seq / "image_0", "P0")
    if not img_dir.is_dir() and not color:
        img_dir, key = seq / "image_2", "P2"
    if not img_dir.is_dir():
        raise OSError(f"no image directory under {seq}")
    paths = sorted(img_dir.glob("*.png"))
    if len(paths) < 2:
        raise OSError(f"need at least two images in {img_dir}, found {len(paths)}")
    try:
        ids = [int(p.stem) for p in paths]
    except ValueError as exc:
        raise OSError(f"image names in {img_dir} must be frame numbers: {exc}") from exc

    from PIL import Image as PILImage

    with PILImage.open(paths[0]) as im:
        width, height = im.size
    calib = parse_calib(calib_path.read_text(), key, width, height, path=calib_path)

    gt = None
    pose_path = root / "poses" / f"{seq_id}.txt"
    if pose_path.is_file():
        gt = read_trajectory(pose_path)
        missing = [f for f in ids if f not in gt.as_dict()]
        if missing:
            raise ParseError(f"pose file has {len(gt)} lines but images go up to frame {ids[-1]}", path=pose_path)
    depth_dir = seq / "depth"
    depth_paths = None
    if depth_dir.is_dir():
        depth_paths = [depth_dir / f"{p.stem}.depth" for p in paths]
        if not all(p.is_file() for p in depth_paths):
            depth_paths = None
    src = SequenceSource("kitti", calib, ids, gt, paths, depth_paths, color=color)
    if frame_range is not None:
        lo, hi = frame_range
        pos = [i for i, f in enumerate(ids) if lo <= f < hi]
        if len(pos) < 2:
            raise InvalidArgumentError(f"frame range {frame_range} selects fewer than two frames")
        src = src.subset(pos[0], pos[-1] + 1)
    if resize is not None:
        src = src.resized(*resize)
    return src


def synthetic_source(scene, trajectory: Trajectory, k: Intrinsics) -> SequenceSource:
    """Frames rendered exactly (float intensities, no 8-bit rounding)."""
    return SequenceSource("synthetic", k, list(trajectory.frame_ids), trajectory, scene=scene)


def write_sequence(root, seq_id: str, src: SequenceSource) -> Path:
    """Write ``src`` in the KITTI layout (8-bit PNG images plus depth files)."""
    from .synth import write_depth

    root = Path(root)
    seq = root / "sequences" / seq_id
    (seq / "image_0").mkdir(parents=True, exist_ok=True)
    (seq / "depth").mkdir(parents=True, exist_ok=True)
    (seq / "calib.txt").write_text(format_calib(src.calib, "P0"))
    for pos, fid in enumerate(src.frame_ids):
        save_image(seq / "image_0" / f"{fid:06d}.png", src.image(pos))
        if src.has_depth:
            write_depth(seq / "depth" / f"{fid:06d}.depth", src.depth(pos))
    if src.gt_poses is not None:
        write_trajectory(root / "poses" / f"{seq_id}.txt", src.gt_poses.subset(src.frame_ids))
    return seq
