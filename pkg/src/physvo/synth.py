"""Point-sampled renderer for textured planes and boxes with exact depth.

Cameras follow the usual vision convention: +z forward, +x right, +y down.
Poses are camera-to-world. Every pixel is shaded by the nearest ray hit, so
rendered depth and labels are exact and the images are exact samples of the
procedural textures (no anti-aliasing).

Label 0 is the background plane, primitives are labelled 1..n in scene order
and -1 marks rays that hit nothing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, ParseError
from .geometry import DepthMap, Intrinsics, Pose

_LATTICE = 64


@dataclass(frozen=True)
class Texture:
    """Value noise (several octaves) optionally mixed with a checkerboard.

    ``scale`` is the lattice spacing of the first octave in meters; smaller
    values give higher spatial frequency.
    """

    seed: int = 0
    scale: float = 0.5
    octaves: int = 2
    checker: float = 0.0
    checker_size: float = 1.0
    low: float = 0.1
    high: float = 0.9

    def __post_init__(self):
        if self.scale <= 0 or self.checker_size <= 0 or self.octaves < 1:
            raise InvalidArgumentError("texture scale, checker size and octaves must be positive")

    def _table(self):
        return np.random.default_rng(self.seed).uniform(size=(self.octaves, _LATTICE, _LATTICE))

    def sample(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        table = self._table()
        acc = np.zeros(np.broadcast(x, y).shape)
        norm = 0.0
        for o in range(self.octaves):
            cell = self.scale / 2**o
            amp = 0.5**o
            acc += amp * _value_noise(table[o], x / cell, y / cell)
            norm += amp
        val = acc / norm
        if self.checker > 0:
            cx = np.floor(x / self.checker_size)
            cy = np.floor(y / self.checker_size)
            board = np.mod(cx + cy, 2.0)
            val = (1.0 - self.checker) * val + self.checker * board
        return self.low + (self.high - self.low) * val


def _fade(t):
    # quintic smoothstep keeps the texture C2 between lattice points
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def _value_noise(table, x, y):
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = _fade(x - x0)
    fy = _fade(y - y0)
    i = np.mod(x0, _LATTICE).astype(np.intp)
    j = np.mod(y0, _LATTICE).astype(np.intp)
    i1 = (i + 1) % _LATTICE
    j1 = (j + 1) % _LATTICE
    top = table[j, i] * (1 - fx) + table[j, i1] * fx
    bot = table[j1, i] * (1 - fx) + table[j1, i1] * fx
    return top * (1 - fy) + bot * fy


@dataclass
class Plane:
    """Textured rectangle spanned by two orthonormal axes around ``center``."""

    center: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half_u: float
    half_v: float
    texture: Texture = field(default_factory=Texture)
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.axis_u = np.asarray(self.axis_u, dtype=np.float64)
        self.axis_v = np.asarray(self.axis_v, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if self.half_u <= 0 or self.half_v <= 0:
            raise InvalidArgumentError("plane extents must be positive")
        self.axis_u = self.axis_u / np.linalg.norm(self.axis_u)
        self.axis_v = self.axis_v - (self.axis_v @ self.axis_u) * self.axis_u
        self.axis_v = self.axis_v / np.linalg.norm(self.axis_v)


@dataclass
class Box:
    """Axis-aligned textured box."""

    lo: np.ndarray
    hi: np.ndarray
    texture: Texture = field(default_factory=Texture)
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if np.any(self.hi <= self.lo):
            raise InvalidArgumentError(f"box has non-positive extent: {self.lo} .. {self.hi}")


@dataclass
class Scene:
    primitives: list = field(default_factory=list)
    background_depth: float = 50.0
    background_texture: Texture = field(default_factory=lambda: Texture(seed=1, scale=4.0))

    @property
    def dynamic(self) -> bool:
        return any(np.any(p.velocity != 0) for p in self.primitives)


@dataclass
class RenderedFrame:
    image: np.ndarray  # (H, W, 1)
    depth: DepthMap
    pose: Pose
    occlusion_labels: np.ndarray


def _hit_plane(plane: Plane, origin, dirs, offset):
    n = np.cross(plane.axis_u, plane.axis_v)
    c = plane.center + offset
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = ((c - origin) @ n) / denom
    q = origin + lam[..., None] * dirs
    lu = (q - c) @ plane.axis_u
    lv = (q - c) @ plane.axis_v
    hit = (np.abs(denom) > 1e-12) & (lam > 0) & (np.abs(lu) <= plane.half_u) & (np.abs(lv) <= plane.half_v)
    return np.where(hit, lam, np.inf), lu, lv


def _hit_box(box: Box, origin, dirs, offset):
    lo = box.lo + offset
    hi = box.hi + offset
    if np.all(origin > lo) and np.all(origin < hi):
        raise InvalidArgumentError("camera is inside a box")
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    near = tmin.max(axis=-1)
    far = tmax.min(axis=-1)
    face = tmin.argmax(axis=-1)
    hit = (near <= far) & (near > 0)
    lam = np.where(hit, near, np.inf)
    q = origin + np.where(hit, near, 0.0)[..., None] * dirs
    # texture coordinates: the two in-face axes in the box's own frame (so the
    # pattern moves with the box), shifted per face so faces differ
    q = q - offset
    other = np.array([[1, 2], [0, 2], [0, 1]])[face]
    a = np.take_along_axis(q, other[..., :1], axis=-1)[..., 0] + 37.0 * face
    b = np.take_along_axis(q, other[..., 1:], axis=-1)[..., 0]
    return lam, a, b


def render(scene: Scene, pose: Pose, k: Intrinsics, frame_t: int = 0) -> RenderedFrame:
    """Render the scene from camera-to-world ``pose`` at time step ``frame_t``."""
    rays = k.rays()
    dirs = rays @ pose.rotation.T
    origin = pose.translation
    h, w = k.shape
    depth = np.full((h, w), np.inf)
    labels = np.full((h, w), -1, dtype=np.int64)
    image = np.zeros((h, w))

    # background plane z = background_depth in world coordinates
    dz = dirs[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = (scene.background_depth - origin[2]) / dz
    hit = (dz > 1e-12) & (lam > 0)
    if origin[2] >= scene.background_depth:
        raise InvalidArgumentError("camera is behind the background plane")
    q = origin + np.where(hit, lam, 0.0)[..., None] * dirs
    depth = np.where(hit, lam, depth)
    labels[hit] = 0
    image = np.where(hit, scene.background_texture.sample(q[..., 0], q[..., 1]), image)

    for idx, prim in enumerate(scene.primitives, start=1):
        offset = prim.velocity * frame_t
        if isinstance(prim, Plane):
            lam, a, b = _hit_plane(prim, origin, dirs, offset)
        elif isinstance(prim, Box):
            lam, a, b = _hit_box(prim, origin, dirs, offset)
        else:
            raise InvalidArgumentError(f"unknown primitive {type(prim).__name__}")
        closer = lam < depth
        if closer.any():
            depth = np.where(closer, lam, depth)
            labels[closer] = idx
            image = np.where(closer, prim.texture.sample(a, b), image)

    # ray parameter equals camera-frame z because rays have unit z
    valid = np.isfinite(depth)
    depth = np.where(valid, depth, 0.0)
    return RenderedFrame(image[..., None], DepthMap(depth, valid), pose.copy(), labels)


def make_sequence(scene: Scene, poses, k: Intrinsics) -> list:
    """Render one frame per pose; frame ``i`` sees dynamic primitives at step ``i``."""
    if hasattr(poses, "poses"):
        items = [(fid, p) for fid, p in poses.poses]
    else:
        items = list(enumerate(poses))
    return [render(scene, p, k, frame_t=fid) for fid, p in items]


# ---------------------------------------------------------------------------
# Ready-made scenes used by tests, demos and the CLI


def textured_wall_scene(depth=8.0, size=40.0, seed=0, scale=0.6) -> Scene:
    """A single large fronto-parallel wall; camera motions parallel to it keep depth exact."""
    wall = Plane([0, 0, depth], [1, 0, 0], [0, 1, 0], size, size, Texture(seed=seed, scale=scale, octaves=3))
    return Scene([wall], background_depth=depth + 50.0)


def slanted_wall_scene(seed=1) -> Scene:
    """A wall 3 m ahead, yawed by about 19 degrees, with a smooth two-octave texture.

    Seen through a wide lens it fills the view, so every pixel has exact depth
    and motions tangent to the wall stay distinguishable from rotations.
    """
    wall = Plane([0, 0, 3.0], [1, 0, 0.35], [0, 1, 0], 7.5, 5.0, Texture(seed=seed, scale=0.5, octaves=2))
    return Scene([wall], background_depth=10.0, background_texture=Texture(seed=seed + 4, scale=3.0))


def corridor_scene(seed=0, scale=0.7) -> Scene:
    """Tilted wall, floor and two boxes in front of a textured background."""
    rng = np.random.default_rng(seed)
    prims = [
        Plane([0, 0, 12], [1, 0, 0.35], [0, 1, 0], 30, 20, Texture(seed=seed + 1, scale=scale, octaves=3)),
        Plane([0, 2.0, 6], [1, 0, 0], [0, 0, 1], 30, 8, Texture(seed=seed + 2, scale=scale, octaves=3)),
        Box([-2.5, -1.0, 6.5], [-1.0, 1.2, 7.5], Texture(seed=seed + 3, scale=scale * 0.7, octaves=2)),
        Box([1.2, -0.5, 8.0], [2.4, 2.0, 9.0], Texture(seed=seed + 4, scale=scale * 0.7, octaves=2)),
    ]
    jitter = rng.uniform(-0.2, 0.2, size=3)
    prims[2].lo = prims[2].lo + jitter
    prims[2].hi = prims[2].hi + jitter
    return Scene(prims, background_depth=40.0, background_texture=Texture(seed=seed + 5, scale=3.0))


def occlusion_scene(seed=0) -> Scene:
    """Wall at 10 m behind a narrow post at 5 m; lateral cameras see different wall strips."""
    wall = Plane([0, 0, 10], [1, 0, 0], [0, 1, 0], 40, 40, Texture(seed=seed, scale=0.6, octaves=3))
    post = Box([-0.3, -20.0, 4.8], [0.3, 20.0, 5.0], Texture(seed=seed + 1, scale=0.3, octaves=2))
    return Scene([wall, post], background_depth=60.0)


def dynamic_box_scene(velocity=(0.0, 0.0, 0.0), seed=0) -> Scene:
    """Textured wall at 12 m with a box near 6 m moving ``velocity`` meters per frame."""
    wall = Plane([0, 0, 12], [1, 0, 0], [0, 1, 0], 40, 40, Texture(seed=seed, scale=0.6, octaves=3))
    box = Box([-1.0, -0.8, 5.5], [1.0, 0.8, 6.5], Texture(seed=seed + 1, scale=0.3, octaves=2), velocity)
    return Scene([wall, box], background_depth=60.0)


# ---------------------------------------------------------------------------
# Scene files: flat ``key = value`` text, see README


def _vec(text, n, key):
    vals = [float(x) for x in text.split()]
    if len(vals) != n:
        raise ValueError(f"{key} needs {n} numbers")
    return np.array(vals)


def _texture_from(kv, prefix) -> Texture:
    args = {}
    for name, conv in (
        ("seed", int),
        ("scale", float),
        ("octaves", int),
        ("checker", float),
        ("checker_size", float),
        ("low", float),
        ("high", float),
    ):
        key = f"{prefix}.texture.{name}"
        if key in kv:
            args[name] = conv(kv[key])
    return Texture(**args)


def scene_from_kv(kv: dict) -> Scene:
    """Build a scene from parsed ``key = value`` entries."""
    scene = Scene(
        background_depth=float(kv.get("background.depth", 50.0)),
        background_texture=_texture_from(kv, "background")
        if any(k.startswith("background.texture.") for k in kv)
        else Texture(seed=1, scale=4.0),
    )
    ids = sorted(
        {tuple(k.split(".")[:2]) for k in kv if k.startswith(("plane.", "box."))},
        key=lambda p: (int(p[1]), p[0]),
    )
    for kind, num in ids:
        pre = f"{kind}.{num}"
        vel = _vec(kv.get(f"{pre}.velocity", "0 0 0"), 3, f"{pre}.velocity")
        tex = _texture_from(kv, pre)
        if kind == "plane":
            half = _vec(kv[f"{pre}.half"], 2, f"{pre}.half")
            prim = Plane(
                _vec(kv[f"{pre}.center"], 3, f"{pre}.center"),
                _vec(kv[f"{pre}.axis_u"], 3, f"{pre}.axis_u"),
                _vec(kv[f"{pre}.axis_v"], 3, f"{pre}.axis_v"),
                half[0],
                half[1],
                tex,
                vel,
            )
        else:
            prim = Box(_vec(kv[f"{pre}.min"], 3, f"{pre}.min"), _vec(kv[f"{pre}.max"], 3, f"{pre}.max"), tex, vel)
        scene.primitives.append(prim)
    return scene


def _fmt(vals):
    return " ".join(repr(float(v)) for v in np.atleast_1d(vals))


def _texture_kv(prefix, tex: Texture) -> dict:
    return {
        f"{prefix}.texture.seed": str(tex.seed),
        f"{prefix}.texture.scale": repr(tex.scale),
        f"{prefix}.texture.octaves": str(tex.octaves),
        f"{prefix}.texture.checker": repr(tex.checker),
        f"{prefix}.texture.checker_size": repr(tex.checker_size),
        f"{prefix}.texture.low": repr(tex.low),
        f"{prefix}.texture.high": repr(tex.high),
    }


def scene_to_kv(scene: Scene) -> dict:
    kv = {"background.depth": repr(float(scene.background_depth))}
    kv.update(_texture_kv("background", scene.background_texture))
    for i, prim in enumerate(scene.primitives):
        if isinstance(prim, Plane):
            pre = f"plane.{i}"
            kv[f"{pre}.center"] = _fmt(prim.center)
            kv[f"{pre}.axis_u"] = _fmt(prim.axis_u)
            kv[f"{pre}.axis_v"] = _fmt(prim.axis_v)
            kv[f"{pre}.half"] = _fmt([prim.half_u, prim.half_v])
        else:
            pre = f"box.{i}"
            kv[f"{pre}.min"] = _fmt(prim.lo)
            kv[f"{pre}.max"] = _fmt(prim.hi)
        kv[f"{pre}.velocity"] = _fmt(prim.velocity)
        kv.update(_texture_kv(pre, prim.texture))
    return kv


def load_scene(path) -> Scene:
    from .config import read_kv

    kv = read_kv(path)
    try:
        return scene_from_kv(kv)
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad scene description: {exc}", path=path) from exc


def save_scene(path, scene: Scene) -> None:
    from .config import write_kv

    write_kv(path, scene_to_kv(scene))


# ---------------------------------------------------------------------------
# Depth files: 16-byte header (8-byte magic, uint32 H, uint32 W), float32 rows

DEPTH_MAGIC = b"DEPTHF32"


def write_depth(path, depth) -> None:
    data = depth.data if isinstance(depth, DepthMap) else np.asarray(depth)
    if isinstance(depth, DepthMap):
        data = np.where(depth.valid, data, 0.0)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_depth(path) -> DepthMap:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != DEPTH_MAGIC:
        raise ParseError("not a depth file (bad magic)", path=path)
    h, w = struct.unpack("<II", raw[8:16])
    if len(raw) != 16 + 4 * h * w:
        raise ParseError(f"depth payload size does not match {h}x{w}", path=path)
    data = np.frombuffer(raw[16:], dtype="<f4").reshape(h, w).astype(np.float64)
    return DepthMap(data)
