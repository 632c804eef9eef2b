"""Image buffers, bilinear sampling, SSIM and image gradients.

Images are float64 arrays in [0, 1] of shape (H, W, C) with C in {1, 3}.
Functions accept (H, W) arrays and treat them as single-channel images.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class SsimParams:
    c1: float = 0.01**2
    c2: float = 0.03**2
    window: int = 1  # half-width; 1 means a 3x3 neighborhood

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise InvalidArgumentError("SSIM stabilizers must be positive")
        if self.window < 1:
            raise InvalidArgumentError("SSIM window half-width must be >= 1")


def as_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise InvalidArgumentError(f"expected HxW or HxWxC image with C in (1, 3), got {img.shape}")
    return img


def to_gray(img) -> np.ndarray:
    """Channel mean, shape (H, W)."""
    return as_image(img).mean(axis=2)


def load_image(path, grayscale=True) -> np.ndarray:
    """Read an 8-bit PNG/PGM into [0, 1]; ``grayscale`` takes the channel mean."""
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return as_image(arr.mean(axis=2) if grayscale else arr)


def save_image(path, img) -> None:
    """Write an image as 8-bit PNG or PGM (chosen by suffix)."""
    from PIL import Image as PILImage

    img = as_image(img)
    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    arr = arr[..., 0] if arr.shape[2] == 1 else arr
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".pgm", ".ppm") else "PNG"
    PILImage.fromarray(arr).save(path, format=fmt)


# ---------------------------------------------------------------------------
# Bilinear sampling

# slack on the [0, w-1] x [0, h-1] bounds so that pixels reprojected onto the
# border by an identity transform are not lost to rounding
BORDER_TOL = 1e-9


def _cells(shape, u, v):
    h, w = shape[:2]
    if h < 2 or w < 2:
        raise InvalidArgumentError(f"bilinear sampling needs at least 2x2 pixels, got {w}x{h}")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    uu = np.where(np.isfinite(u), u, 0.0)
    vv = np.where(np.isfinite(v), v, 0.0)
    j0 = np.clip(np.floor(uu), 0, w - 2).astype(np.intp)
    i0 = np.clip(np.floor(vv), 0, h - 2).astype(np.intp)
    a = uu - j0
    b = vv - i0
    t = BORDER_TOL
    in_bounds = np.isfinite(u) & np.isfinite(v) & (u >= -t) & (u <= w - 1 + t) & (v >= -t) & (v <= h - 1 + t)
    return i0, j0, a, b, in_bounds


def bilinear_sample(img, u, v):
    """Sample ``img`` at continuous pixel coordinates ``(u, v)``.

    ``u`` runs along columns and ``v`` along rows. Returns ``(values, in_bounds)``;
    ``values`` keeps the channel axis of ``img`` (a 2-D ``img`` is sampled as one
    channel). A sample is in bounds only if all four taps lie inside the image.
    Out-of-bounds samples extrapolate from the nearest border cell.
    """
    img = as_image(img)
    i0, j0, a, b, in_bounds = _cells(img.shape, u, v)
    a = a[..., None]
    b = b[..., None]
    val = (
        (1 - a) * (1 - b) * img[i0, j0]
        + a * (1 - b) * img[i0, j0 + 1]
        + (1 - a) * b * img[i0 + 1, j0]
        + a * b * img[i0 + 1, j0 + 1]
    )
    return val, in_bounds


def bilinear_sample_with_grad(img, u, v):
    """Like :func:`bilinear_sample` but also returns d/du, d/dv and the tap layout.

    The taps are ``(i0, j0, a, b)`` so callers can scatter gradients back onto
    the sampled image with :func:`bilinear_scatter`.
    """
    img = as_image(img)
    i0, j0, a, b, in_bounds = _cells(img.shape, u, v)
    I00 = img[i0, j0]
    I01 = img[i0, j0 + 1]
    I10 = img[i0 + 1, j0]
    I11 = img[i0 + 1, j0 + 1]
    a_ = a[..., None]
    b_ = b[..., None]
    val = (1 - a_) * (1 - b_) * I00 + a_ * (1 - b_) * I01 + (1 - a_) * b_ * I10 + a_ * b_ * I11
    du = (1 - b_) * (I01 - I00) + b_ * (I11 - I10)
    dv = (1 - a_) * (I10 - I00) + a_ * (I11 - I01)
    return val, du, dv, in_bounds, (i0, j0, a, b)


def bilinear_scatter(grad_out, taps, shape) -> np.ndarray:
    """Adjoint of bilinear sampling w.r.t. the sampled (single-channel) map."""
    i0, j0, a, b = taps
    h, w = shape
    g = np.asarray(grad_out, dtype=np.float64).ravel()
    i0 = i0.ravel()
    j0 = j0.ravel()
    a = a.ravel()
    b = b.ravel()
    idx = np.concatenate([i0 * w + j0, i0 * w + j0 + 1, (i0 + 1) * w + j0, (i0 + 1) * w + j0 + 1])
    wts = np.concatenate([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b]) * np.tile(g, 4)
    return np.bincount(idx, weights=wts, minlength=h * w).reshape(h, w)


# ---------------------------------------------------------------------------
# Box filtering with edge replication, and its adjoint


def box_filter(x, r=1) -> np.ndarray:
    # separable: rows then columns, each over an edge-replicated copy
    h, w = x.shape
    x = np.asarray(x, dtype=np.float64)
    p = np.concatenate([x[:, :1]] * r + [x] + [x[:, -1:]] * r, axis=1)
    rows = p[:, 0:w].copy()
    for dj in range(1, 2 * r + 1):
        rows += p[:, dj : dj + w]
    p = np.concatenate([rows[:1]] * r + [rows] + [rows[-1:]] * r, axis=0)
    out = p[0:h].copy()
    for di in range(1, 2 * r + 1):
        out += p[di : di + h]
    return out / (2 * r + 1) ** 2


def box_filter_adjoint(g, r=1) -> np.ndarray:
    h, w = g.shape
    gp = np.zeros((h + 2 * r, w + 2 * r))
    g = g / (2 * r + 1) ** 2
    for di in range(2 * r + 1):
        for dj in range(2 * r + 1):
            gp[di : di + h, dj : dj + w] += g
    # fold the replicated border back onto the edge pixels
    rows = gp[r : r + h, :].copy()
    rows[0] += gp[:r, :].sum(axis=0)
    rows[-1] += gp[r + h :, :].sum(axis=0)
    out = rows[:, r : r + w].copy()
    out[:, 0] += rows[:, :r].sum(axis=1)
    out[:, -1] += rows[:, r + w :].sum(axis=1)
    return out


# ---------------------------------------------------------------------------
# SSIM


def _ssim_stats(a, b, p: SsimParams):
    r = p.window
    mu_a = box_filter(a, r)
    mu_b = box_filter(b, r)
    var_a = box_filter(a * a, r) - mu_a * mu_a
    var_b = box_filter(b * b, r) - mu_b * mu_b
    cov = box_filter(a * b, r) - mu_a * mu_b
    n1 = 2 * mu_a * mu_b + p.c1
    n2 = 2 * cov + p.c2
    d1 = mu_a * mu_a + mu_b * mu_b + p.c1
    d2 = var_a + var_b + p.c2
    return mu_a, mu_b, n1, n2, d1, d2


def ssim_map(a, b, p: SsimParams = SsimParams()) -> np.ndarray:
    """Per-pixel SSIM of the channel-mean images, clipped to [-1, 1]."""
    a = to_gray(a)
    b = to_gray(b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"SSIM inputs differ in shape: {a.shape} vs {b.shape}")
    _, _, n1, n2, d1, d2 = _ssim_stats(a, b, p)
    return np.clip(n1 * n2 / (d1 * d2), -1.0, 1.0)


def ssim_map_backward(a, b, grad_ssim, p: SsimParams = SsimParams()) -> np.ndarray:
    """Gradient of ``sum(grad_ssim * ssim_map(a, b))`` w.r.t. the gray image ``b``."""
    a = to_gray(a)
    b = to_gray(b)
    r = p.window
    mu_a, mu_b, n1, n2, d1, d2 = _ssim_stats(a, b, p)
    s = n1 * n2 / (d1 * d2)
    g = np.where(np.abs(s) <= 1.0, grad_ssim, 0.0)
    g_n1 = g * n2 / (d1 * d2)
    g_n2 = g * n1 / (d1 * d2)
    g_d1 = -g * s / d1
    g_d2 = -g * s / d2
    g_cov = 2 * g_n2
    g_var_b = g_d2
    g_mu_b = 2 * mu_a * g_n1 + 2 * mu_b * g_d1 - 2 * mu_b * g_var_b - mu_a * g_cov
    return (
        box_filter_adjoint(g_mu_b, r)
        + 2 * b * box_filter_adjoint(g_var_b, r)
        + a * box_filter_adjoint(g_cov, r)
    )


def image_gradients(img) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences along x and y; last column/row is zero.

    Returned arrays keep the channel axis of the (H, W, C) image.
    """
    img = as_image(img)
    h, w = img.shape[:2]
    if h < 2 or w < 2:
        raise InvalidArgumentError(f"image gradients need at least 2x2 pixels, got {w}x{h}")
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, :-1] = img[:, 1:] - img[:, :-1]
    gy[:-1, :] = img[1:, :] - img[:-1, :]
    return gx, gy
