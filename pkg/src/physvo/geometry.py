"""Pinhole camera, rigid transforms and depth-based inverse warping.

Poses are stored as a rotation matrix plus translation and perturbed through
6-vector twists ``(v, w)``: ``v`` is the translational part in meters and ``w``
the axis-angle rotation in radians.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .photometric import BORDER_TOL, as_image, bilinear_sample_with_grad

# near-plane cutoff in meters; points at or in front of it are invalid
Z_MIN = 1e-3


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise InvalidArgumentError(f"bad image size {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgumentError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def rays(self) -> np.ndarray:
        """Unit-depth viewing rays ``K^-1 (u, v, 1)`` for every pixel, shape (H, W, 3)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        rays = np.empty((self.height, self.width, 3))
        rays[..., 0] = (u - self.cx) / self.fx
        rays[..., 1] = (v - self.cy) / self.fy
        rays[..., 2] = 1.0
        return rays


def rescale_intrinsics(k: Intrinsics, new_w: int, new_h: int) -> Intrinsics:
    """Intrinsics for the same camera after resizing the image to ``new_w`` x ``new_h``."""
    if new_w < 1 or new_h < 1:
        raise InvalidArgumentError(f"target size must be positive, got {new_w}x{new_h}")
    sx = new_w / k.width
    sy = new_h / k.height
    return Intrinsics(k.fx * sx, k.fy * sy, k.cx * sx, k.cy * sy, int(new_w), int(new_h))


# ---------------------------------------------------------------------------
# Lie group helpers


def hat(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def vee(m) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * W + b * W @ W


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    skew = 0.5 * vee(R - R.T)
    s = np.linalg.norm(skew)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(s, c)
    if theta < 1e-8:
        return skew
    if np.pi - theta < 1e-2:
        # axis from the symmetric part; the skew part is too small to trust
        S = 0.5 * (R + R.T) - c * np.eye(3)
        i = int(np.argmax(np.diag(S)))
        axis = S[:, i] / np.sqrt(S[i, i] * (1.0 - c))
        axis /= np.linalg.norm(axis)
        if axis @ skew < 0:
            axis = -axis
        return theta * axis
    return theta / s * skew


def _left_jacobian(w) -> np.ndarray:
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / theta**2 * W
        + (theta - np.sin(theta)) / theta**3 * W @ W
    )


def _left_jacobian_inv(w) -> np.ndarray:
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * W + W @ W / 12.0
    half = 0.5 * theta
    coef = (1.0 - half / np.tan(half)) / theta**2
    return np.eye(3) - 0.5 * W + coef * W @ W


@dataclass
class Pose:
    """Rigid transform ``x -> R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.array(self.translation, dtype=np.float64).reshape(3)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation))

    __hash__ = None

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def exp(cls, twist) -> Pose:
        twist = np.asarray(twist, dtype=np.float64)
        v, w = twist[:3], twist[3:]
        return cls(so3_exp(w), _left_jacobian(w) @ v)

    def log(self) -> np.ndarray:
        w = so3_log(self.rotation)
        return np.concatenate([_left_jacobian_inv(w) @ self.translation, w])

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def center(self) -> np.ndarray:
        """Translation of a camera-to-world pose, i.e. the camera center."""
        return self.translation

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: Pose) -> Pose:
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def adjoint(self) -> np.ndarray:
        """6x6 adjoint for ``(v, w)`` twists: ``T exp(x) T^-1 = exp(Ad x)``."""
        R = self.rotation
        ad = np.zeros((6, 6))
        ad[:3, :3] = R
        ad[:3, 3:] = hat(self.translation) @ R
        ad[3:, 3:] = R
        return ad

    def is_valid(self, tol=1e-9) -> bool:
        R = self.rotation
        return bool(
            np.allclose(R.T @ R, np.eye(3), atol=tol)
            and abs(np.linalg.det(R) - 1.0) < tol
            and np.all(np.isfinite(self.translation))
        )

    def copy(self) -> Pose:
        return Pose(self.rotation.copy(), self.translation.copy())


def rotation_angle(R) -> float:
    """Rotation angle of ``R`` in radians."""
    return float(np.linalg.norm(so3_log(R)))


# ---------------------------------------------------------------------------
# Depth, projection and warping


@dataclass
class DepthMap:
    data: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise InvalidArgumentError(f"depth must be HxW, got shape {self.data.shape}")
        if self.valid is None:
            self.valid = np.isfinite(self.data) & (self.data > 0)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.data.shape:
                raise InvalidArgumentError("depth mask shape differs from depth shape")
            if np.any(~(self.data[self.valid] > 0)):
                raise InvalidArgumentError("non-positive depth at a valid pixel")

    @property
    def shape(self):
        return self.data.shape


def _as_depth(depth) -> DepthMap:
    return depth if isinstance(depth, DepthMap) else DepthMap(depth)


def _check_shape(k: Intrinsics, shape, what):
    if tuple(shape[:2]) != k.shape:
        raise InvalidArgumentError(f"{what} has shape {tuple(shape[:2])}, intrinsics expect {k.shape}")


def backproject(k: Intrinsics, depth) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame points ``d * K^-1 (u, v, 1)``.

    Returns ``(points, valid)``; points at invalid pixels are NaN.
    """
    depth = _as_depth(depth)
    _check_shape(k, depth.shape, "depth map")
    points = k.rays() * depth.data[..., None]
    points[~depth.valid] = np.nan
    return points, depth.valid.copy()


def project(k: Intrinsics, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pinhole projection of (..., 3) points.

    Returns ``(uv, z, valid)`` where ``uv`` has a trailing axis of size 2 and
    ``valid`` requires ``z > Z_MIN`` and a sample inside ``[0, w-1] x [0, h-1]``
    (up to ``BORDER_TOL`` pixels of rounding slack).
    """
    points = np.asarray(points, dtype=np.float64)
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * x / z + k.cx
        v = k.fy * y / z + k.cy
    t = BORDER_TOL
    valid = (z > Z_MIN) & (u >= -t) & (u <= k.width - 1 + t) & (v >= -t) & (v <= k.height - 1 + t)
    valid &= np.isfinite(u) & np.isfinite(v)
    return np.stack([u, v], axis=-1), z, valid


@dataclass
class WarpResult:
    """Target-aligned resampling of a source frame.

    ``image`` and ``proj_depth`` hold zeros at invalid pixels. The sampling
    derivatives are filled only when requested by the loss engine.
    """

    image: np.ndarray
    proj_depth: np.ndarray
    comp_depth: np.ndarray
    valid: np.ndarray
    coords: np.ndarray
    source_points: np.ndarray
    image_du: np.ndarray | None = None
    image_dv: np.ndarray | None = None
    depth_du: np.ndarray | None = None
    depth_dv: np.ndarray | None = None
    taps: tuple | None = None


def warp(
    target_depth,
    pose_t_to_s: Pose,
    k: Intrinsics,
    source_img,
    source_depth,
    valid=None,
    with_grad=False,
) -> WarpResult:
    """Inverse-warp ``source_img`` and ``source_depth`` into the target view.

    Passing ``valid`` freezes the validity mask instead of recomputing it; the
    loss engine uses this to differentiate with a fixed pixel set.
    """
    target_depth = _as_depth(target_depth)
    source_depth = _as_depth(source_depth)
    source_img = as_image(source_img)
    _check_shape(k, target_depth.shape, "target depth")
    _check_shape(k, source_depth.shape, "source depth")
    _check_shape(k, source_img.shape, "source image")

    X_t, ok = backproject(k, target_depth)
    X_s = pose_t_to_s.apply(X_t)
    uv, comp, in_view = project(k, X_s)
    finite = np.isfinite(uv).all(axis=-1)
    u = np.where(finite, uv[..., 0], 0.0)
    v = np.where(finite, uv[..., 1], 0.0)

    img, img_du, img_dv, in_bounds, taps = bilinear_sample_with_grad(source_img, u, v)
    sd = np.where(source_depth.valid, source_depth.data, 0.0)
    proj, d_du, d_dv, _, _ = bilinear_sample_with_grad(sd, u, v)
    proj = proj[..., 0]

    if valid is None:
        valid = ok & in_view & in_bounds
        # all four depth taps must come from valid source pixels
        i0, j0, _, _ = taps
        sv = source_depth.valid
        valid &= sv[i0, j0] & sv[i0, j0 + 1] & sv[i0 + 1, j0] & sv[i0 + 1, j0 + 1]
    else:
        valid = np.asarray(valid, dtype=bool) & finite

    res = WarpResult(
        image=np.where(valid[..., None], img, 0.0),
        proj_depth=np.where(valid, proj, 0.0),
        comp_depth=np.where(valid, comp, 0.0),
        valid=valid,
        coords=uv,
        source_points=X_s,
    )
    if with_grad:
        res.image_du, res.image_dv = img_du, img_dv
        res.depth_du, res.depth_dv = d_du[..., 0], d_dv[..., 0]
        res.taps = taps
    return res
