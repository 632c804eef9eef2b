"""Self-supervised window objective and its analytic gradients.

Per anchor frame ``t`` and source frame ``s`` the source is inverse-warped into
``t`` and scored with a photometric cost (SSIM + L1) and a scale-invariant
depth-consistency cost. Each pixel keeps the cheapest valid source, pixels
whose best reconstruction does not beat the unwarped (zero motion) one are
masked out, and an edge-aware disparity smoothness term is added.

Gradients are taken w.r.t. right-multiplied twists of the per-frame
camera-to-window poses (``P <- P exp(x)``) and the log-depth of each anchor.
Source selection and all masks are treated as constants of the current
iterate: pass ``frozen=`` to evaluate the loss with the structure of another
iterate, which is what the finite-difference checks differentiate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, InvalidArgumentError
from .geometry import DepthMap, Intrinsics, Pose, warp
from .photometric import (
    SsimParams,
    as_image,
    bilinear_scatter,
    image_gradients,
    ssim_map,
    ssim_map_backward,
    to_gray,
)

# residuals below this are treated as exact zeros of |.| (zero subgradient)
SIGN_DEADBAND = 1e-12


def _sign(x):
    return np.where(np.abs(x) > SIGN_DEADBAND, np.sign(x), 0.0)


@dataclass(frozen=True)
class LossConfig:
    mu: float = 0.85
    lambda_geo: float = 0.5
    lambda_smooth: float = 1e-3
    delta: float = 0.0
    epsilon: float = 1e-7
    mask_smoothness: bool = True
    ssim: SsimParams = field(default_factory=SsimParams)

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise InvalidArgumentError(f"mu must lie in [0, 1], got {self.mu}")
        if self.lambda_geo < 0 or self.lambda_smooth < 0:
            raise InvalidArgumentError("loss weights must be non-negative")
        if self.delta < 0:
            raise InvalidArgumentError(f"delta must be non-negative, got {self.delta}")
        if not self.epsilon > 0:
            raise InvalidArgumentError(f"epsilon must be positive, got {self.epsilon}")


@dataclass
class CostMap:
    data: np.ndarray
    valid: np.ndarray


@dataclass
class SelectionResult:
    cost: np.ndarray
    source_index: np.ndarray
    valid: np.ndarray


@dataclass
class AutoMask:
    keep: np.ndarray


def _same_shape(*arrays):
    shapes = {np.shape(a)[:2] for a in arrays}
    if len(shapes) != 1:
        raise InvalidArgumentError(f"dimension mismatch: {sorted(shapes)}")


# ---------------------------------------------------------------------------
# Per-map terms


def photometric_loss(target, warped, valid, cfg: LossConfig = LossConfig()) -> CostMap:
    """``mu * (1 - SSIM) / 2 + (1 - mu) * |target - warped|`` per pixel.

    Warped values at invalid pixels are replaced by the target before the SSIM
    window statistics are formed, so they never leak into valid pixels.
    """
    target = as_image(target)
    warped = as_image(warped)
    valid = np.asarray(valid, dtype=bool)
    if target.shape != warped.shape:
        raise InvalidArgumentError(f"image shapes differ: {target.shape} vs {warped.shape}")
    _same_shape(target, valid)
    filled = np.where(valid[..., None], warped, target)
    ssim = ssim_map(target, filled, cfg.ssim)
    l1 = np.abs(target - filled).mean(axis=2)
    data = cfg.mu * (1.0 - ssim) / 2.0 + (1.0 - cfg.mu) * l1
    return CostMap(np.where(valid, data, 0.0), valid.copy())


def geometric_loss(comp_depth, proj_depth, valid, cfg: LossConfig = LossConfig()) -> CostMap:
    comp = np.asarray(comp_depth, dtype=np.float64)
    proj = np.asarray(proj_depth, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    _same_shape(comp, proj, valid)
    if np.any(~(comp[valid] > 0)) or np.any(~(proj[valid] > 0)):
        raise ContractViolation("geometric loss needs positive depths at valid pixels")
    c = np.where(valid, comp, 1.0)
    p = np.where(valid, proj, 1.0)
    data = np.abs(c - p) / (c + p + cfg.epsilon)
    return CostMap(np.where(valid, data, 0.0), valid.copy())


def combined_cost(photo: CostMap, geo: CostMap, cfg: LossConfig = LossConfig()) -> CostMap:
    _same_shape(photo.data, geo.data)
    if not np.array_equal(photo.valid, geo.valid):
        raise ContractViolation("photometric and geometric masks differ")
    valid = photo.valid & geo.valid
    return CostMap(np.where(valid, photo.data + cfg.lambda_geo * geo.data, 0.0), valid)


def min_cost_select(costs) -> SelectionResult:
    """Per-pixel cheapest valid source; ties go to the lowest index."""
    costs = list(costs)
    if not costs:
        raise InvalidArgumentError("need at least one source cost map")
    _same_shape(*[c.data for c in costs])
    stack = np.stack([np.where(c.valid, c.data, np.inf) for c in costs])
    index = np.argmin(stack, axis=0)
    best = np.take_along_axis(stack, index[None], axis=0)[0]
    valid = np.isfinite(best)
    return SelectionResult(np.where(valid, best, 0.0), np.where(valid, index, -1), valid)


def auto_mask(photo_losses, identity_losses, cfg: LossConfig = LossConfig()) -> AutoMask:
    """Keep pixels whose best warped cost beats ``(1 + delta)`` x the best unwarped cost."""
    photo_losses = list(photo_losses)
    identity_losses = list(identity_losses)
    if not photo_losses or len(photo_losses) != len(identity_losses):
        raise InvalidArgumentError(
            f"need matching non-empty source lists, got {len(photo_losses)} and {len(identity_losses)}"
        )
    _same_shape(*[c.data for c in photo_losses + identity_losses])
    warped = np.stack([np.where(c.valid, c.data, np.inf) for c in photo_losses]).min(axis=0)
    ident = np.stack([c.data for c in identity_losses]).min(axis=0)
    return AutoMask(warped < (1.0 + cfg.delta) * ident)


def _normalized_disparity(depth: DepthMap):
    disp = np.where(depth.valid, 1.0 / np.where(depth.valid, depth.data, 1.0), 0.0)
    n = int(depth.valid.sum())
    mean = disp.sum() / n
    return np.where(depth.valid, disp / mean, 1.0), disp, mean, n


def _edge_weights(img):
    gx, gy = image_gradients(img)
    return np.exp(-np.abs(gx).mean(axis=2)), np.exp(-np.abs(gy).mean(axis=2))


def smoothness_loss(depth, img) -> CostMap:
    """Edge-aware smoothness of the mean-normalized disparity."""
    depth = depth if isinstance(depth, DepthMap) else DepthMap(depth)
    img = as_image(img)
    _same_shape(depth.data, img)
    if not depth.valid.any():
        raise ContractViolation("smoothness needs at least one valid depth")
    dn, _, _, _ = _normalized_disparity(depth)
    ex, ey = _edge_weights(img)
    dx, dy = image_gradients(dn)
    data = np.abs(dx[..., 0]) * ex + np.abs(dy[..., 0]) * ey
    return CostMap(data, depth.valid.copy())


def _smoothness_backward(depth: DepthMap, img, grad) -> np.ndarray:
    """Gradient of ``sum(grad * smoothness)`` w.r.t. log-depth."""
    dn, disp, mean, n = _normalized_disparity(depth)
    ex, ey = _edge_weights(img)
    dx, dy = image_gradients(dn)
    gdx = grad * ex * _sign(dx[..., 0])
    gdy = grad * ey * _sign(dy[..., 0])
    gdx[:, -1] = 0.0
    gdy[-1, :] = 0.0
    g_dn = np.zeros_like(dn)
    g_dn[:, 1:] += gdx[:, :-1]
    g_dn[:, :-1] -= gdx[:, :-1]
    g_dn[1:, :] += gdy[:-1, :]
    g_dn[:-1, :] -= gdy[:-1, :]
    g_dn = np.where(depth.valid, g_dn, 0.0)
    g_disp = g_dn / mean - (g_dn * disp).sum() / (mean * mean * n)
    return np.where(depth.valid, -g_disp * disp, 0.0)


# ---------------------------------------------------------------------------
# Window objective


@dataclass
class WindowInputs:
    """Everything the objective reads for one window.

    ``poses[i]`` maps camera ``i`` into the window frame; ``anchors`` index into
    the window. Every frame needs a depth map because sources contribute their
    depth to the consistency term, but only anchor depths receive gradients.
    """

    images: list
    depths: list
    poses: list
    k: Intrinsics
    anchors: list

    def __post_init__(self):
        self.images = [as_image(im) for im in self.images]
        self.depths = [d if isinstance(d, DepthMap) else DepthMap(d) for d in self.depths]
        n = len(self.images)
        if n < 2 or len(self.depths) != n or len(self.poses) != n:
            raise InvalidArgumentError(
                f"need >= 2 frames with one depth and pose each, got "
                f"{n} images, {len(self.depths)} depths, {len(self.poses)} poses"
            )
        shape = self.k.shape
        for im, d in zip(self.images, self.depths):
            if im.shape[:2] != shape or d.shape != shape:
                raise InvalidArgumentError(f"frame buffers must be {shape}, got {im.shape[:2]} / {d.shape}")
        if len(self.anchors) < 1:
            raise InvalidArgumentError("need at least one anchor")
        if len(set(self.anchors)) != len(self.anchors) or not all(0 <= a < n for a in self.anchors):
            raise InvalidArgumentError(f"bad anchor list {self.anchors} for {n} frames")

    def sources(self, anchor):
        return [i for i in range(len(self.images)) if i != anchor]

    def relative_pose(self, t, s) -> Pose:
        """Maps points from camera ``t`` into camera ``s``."""
        return self.poses[s].inverse() @ self.poses[t]


@dataclass
class AnchorDiagnostics:
    anchor: int
    sources: list
    source_valid: np.ndarray  # (n_sources, H, W) warp validity
    selection: SelectionResult
    automask: AutoMask
    valid: np.ndarray  # pixels entering the mean
    loss: float = 0.0
    photo_mean: float = 0.0
    geo_mean: float = 0.0
    smooth_mean: float = 0.0

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


@dataclass
class LossResult:
    loss: float
    anchors: list
    photo_mean: float
    geo_mean: float
    smooth_mean: float
    valid_fraction: float
    degenerate: bool


@dataclass
class Gradients:
    result: LossResult
    pose: np.ndarray  # (S, 6) right-multiplied twist gradient per frame
    log_depth: dict  # anchor -> (H, W)

    def norm(self, skip_gauge=False) -> float:
        p = self.pose[1:] if skip_gauge else self.pose
        sq = float((p * p).sum())
        for g in self.log_depth.values():
            sq += float((g * g).sum())
        return float(np.sqrt(sq))


def total_loss(inputs: WindowInputs, cfg: LossConfig = LossConfig(), frozen=None) -> LossResult:
    """Masked mean of selected cost plus smoothness, averaged over anchors.

    A window whose valid set is empty returns ``loss == 0`` with ``degenerate``
    set. ``frozen`` takes the ``anchors`` list of an earlier result.
    """
    return _evaluate(inputs, cfg, frozen, want_grad=False)[0]


def loss_gradients(inputs: WindowInputs, cfg: LossConfig = LossConfig(), frozen=None) -> Gradients:
    result, pose_g, depth_g = _evaluate(inputs, cfg, frozen, want_grad=True)
    return Gradients(result, pose_g, depth_g)


def piece_signature(inputs: WindowInputs, cfg: LossConfig = LossConfig(), frozen=None) -> list:
    """Discrete state selecting the smooth piece of the objective at ``inputs``.

    Two evaluation points with equal signatures (and the same frozen
    selection/masks) lie on the same smooth piece: same bilinear cells, same
    signs inside every absolute value, same SSIM clipping.
    """
    sig = []
    _evaluate(inputs, cfg, frozen, want_grad=False, signature=sig)
    return sig


def same_piece(sig_a, sig_b) -> bool:
    return len(sig_a) == len(sig_b) and all(np.array_equal(a, b) for a, b in zip(sig_a, sig_b))


def _evaluate(inputs: WindowInputs, cfg: LossConfig, frozen, want_grad, signature=None):
    k = inputs.k
    h, w = k.shape
    rays = k.rays()
    n_frames = len(inputs.images)
    frozen_by_anchor = {d.anchor: d for d in frozen} if frozen is not None else None

    # forward pass; keep what the backward pass needs
    records = []
    for t in inputs.anchors:
        It = inputs.images[t]
        Dt = inputs.depths[t]
        srcs = inputs.sources(t)
        fz = frozen_by_anchor[t] if frozen_by_anchor is not None else None
        if fz is not None and fz.sources != srcs:
            raise InvalidArgumentError("frozen structure does not match the window layout")
        warps, photos, geos, costs, idents = [], [], [], [], []
        for j, s in enumerate(srcs):
            T = inputs.relative_pose(t, s)
            fv = fz.source_valid[j] if fz is not None else None
            wr = warp(Dt, T, k, inputs.images[s], inputs.depths[s], valid=fv, with_grad=want_grad)
            ph = photometric_loss(It, wr.image, wr.valid, cfg)
            ge = _geo_unchecked(wr.comp_depth, wr.proj_depth, wr.valid, cfg)
            warps.append((s, T, wr))
            photos.append(ph)
            geos.append(ge)
            costs.append(combined_cost(ph, ge, cfg))
            if signature is not None:
                _collect_signature(signature, It, wr, inputs.images[s], inputs.depths[s], cfg)
            if fz is None:
                idents.append(photometric_loss(It, inputs.images[s], np.ones((h, w), bool), cfg))
        if fz is None:
            sel = min_cost_select(costs)
            am = auto_mask(photos, idents, cfg)
            V = sel.valid & am.keep
        else:
            sel_index = fz.selection.source_index
            stack = np.stack([c.data for c in costs])
            picked = np.take_along_axis(stack, np.maximum(sel_index, 0)[None], axis=0)[0]
            sel = SelectionResult(np.where(fz.selection.valid, picked, 0.0), sel_index, fz.selection.valid)
            am = fz.automask
            V = fz.valid
        smooth = smoothness_loss(Dt, It)
        if signature is not None:
            dn = _normalized_disparity(Dt)[0]
            dx, dy = image_gradients(dn)
            signature.extend([_sign(dx[..., 0]), _sign(dy[..., 0])])
        diag = AnchorDiagnostics(
            anchor=t,
            sources=srcs,
            source_valid=np.stack([wr.valid for _, _, wr in warps]),
            selection=sel,
            automask=am,
            valid=V,
        )
        records.append((diag, warps, photos, geos, smooth))

    active = [r for r in records if r[0].n_valid > 0]
    n_active = len(active)
    total = 0.0
    photo_sum = geo_sum = smooth_sum = 0.0
    for diag, warps, photos, geos, smooth in records:
        V = diag.valid
        n = diag.n_valid
        if n == 0:
            continue
        idx = diag.selection.source_index
        ph_sel = np.take_along_axis(np.stack([p.data for p in photos]), np.maximum(idx, 0)[None], 0)[0]
        ge_sel = np.take_along_axis(np.stack([g.data for g in geos]), np.maximum(idx, 0)[None], 0)[0]
        diag.photo_mean = float(ph_sel[V].sum() / n)
        diag.geo_mean = float(ge_sel[V].sum() / n)
        if cfg.mask_smoothness:
            diag.smooth_mean = float(smooth.data[V].sum() / n)
        else:
            diag.smooth_mean = float(smooth.data[smooth.valid].mean())
        diag.loss = float(diag.selection.cost[V].sum() / n) + cfg.lambda_smooth * diag.smooth_mean
        total += diag.loss
        photo_sum += diag.photo_mean
        geo_sum += diag.geo_mean
        smooth_sum += diag.smooth_mean

    diags = [r[0] for r in records]
    n_pix = len(records) * h * w
    valid_fraction = sum(d.n_valid for d in diags) / n_pix
    if n_active == 0:
        result = LossResult(0.0, diags, 0.0, 0.0, 0.0, 0.0, True)
    else:
        result = LossResult(
            total / n_active,
            diags,
            photo_sum / n_active,
            geo_sum / n_active,
            smooth_sum / n_active,
            valid_fraction,
            False,
        )
    if not want_grad:
        return result, None, None

    pose_g = np.zeros((n_frames, 6))
    depth_g = {t: np.zeros((h, w)) for t in inputs.anchors}
    anchor_set = set(inputs.anchors)
    for diag, warps, photos, geos, smooth in active:
        t = diag.anchor
        It = inputs.images[t]
        Dt = inputs.depths[t]
        n = diag.n_valid
        wgt = 1.0 / (n_active * n)
        V = diag.valid
        C = It.shape[2]
        for j, (s, T, wr) in enumerate(warps):
            g = np.where(V & (diag.selection.source_index == j), wgt, 0.0)
            if not g.any():
                continue
            valid = wr.valid
            # photometric part, w.r.t. the target-filled warped image
            filled = np.where(valid[..., None], wr.image, It)
            g_gray = ssim_map_backward(It, filled, -0.5 * cfg.mu * g, cfg.ssim)
            g_img = g_gray[..., None] / C + ((1.0 - cfg.mu) * g / C)[..., None] * _sign(filled - It)
            g_img = np.where(valid[..., None], g_img, 0.0)
            g_u = (g_img * wr.image_du).sum(axis=2)
            g_v = (g_img * wr.image_dv).sum(axis=2)
            # depth-consistency part
            gG = cfg.lambda_geo * g
            c = np.where(valid, wr.comp_depth, 1.0)
            p = np.where(valid, wr.proj_depth, 1.0)
            den = c + p + cfg.epsilon
            r = c - p
            sg = _sign(r)
            g_c = np.where(valid, gG * (sg / den - np.abs(r) / den**2), 0.0)
            g_p = np.where(valid, gG * (-sg / den - np.abs(r) / den**2), 0.0)
            g_u = g_u + g_p * wr.depth_du
            g_v = g_v + g_p * wr.depth_dv
            if s in anchor_set:
                g_src = bilinear_scatter(np.where(valid, g_p, 0.0), wr.taps, (h, w))
                Ds = inputs.depths[s]
                depth_g[s] += np.where(Ds.valid, g_src * Ds.data, 0.0)
            # through the projection into the source camera
            Xs = np.where(valid[..., None], wr.source_points, 0.0)
            x, y = Xs[..., 0], Xs[..., 1]
            z = np.where(valid, Xs[..., 2], 1.0)
            gX = np.empty_like(Xs)
            gX[..., 0] = g_u * k.fx / z
            gX[..., 1] = g_v * k.fy / z
            gX[..., 2] = -(g_u * k.fx * x + g_v * k.fy * y) / (z * z) + g_c
            gX = np.where(valid[..., None], gX, 0.0)
            g_rel = np.concatenate([gX.reshape(-1, 3).sum(axis=0), np.cross(Xs, gX).reshape(-1, 3).sum(axis=0)])
            pose_g[t] += T.adjoint().T @ g_rel
            pose_g[s] -= g_rel
            # target depth: X_s = R d ray + t
            g_Xt = gX @ T.rotation
            depth_g[t] += np.where(valid, (g_Xt * rays).sum(axis=2) * np.where(valid, Dt.data, 0.0), 0.0)
        if cfg.lambda_smooth > 0:
            if cfg.mask_smoothness:
                gs = np.where(V, cfg.lambda_smooth * wgt, 0.0)
            else:
                gs = np.where(smooth.valid, cfg.lambda_smooth / (n_active * smooth.valid.sum()), 0.0)
            depth_g[t] += _smoothness_backward(Dt, It, gs)
    return result, pose_g, depth_g


def _collect_signature(sig, It, wr, source_img, source_depth, cfg):
    from .photometric import _cells, _ssim_stats

    valid = wr.valid
    u = np.where(valid, wr.coords[..., 0], 0.0)
    v = np.where(valid, wr.coords[..., 1], 0.0)
    i0, j0, _, _, _ = _cells(It.shape, u, v)
    filled = np.where(valid[..., None], wr.image, It)
    _, _, n1, n2, d1, d2 = _ssim_stats(to_gray(It), to_gray(filled), cfg.ssim)
    sig.extend(
        [
            valid,
            np.where(valid, i0, -1),
            np.where(valid, j0, -1),
            _sign(filled - It),
            _sign(np.where(valid, wr.comp_depth - wr.proj_depth, 0.0)),
            np.abs(n1 * n2 / (d1 * d2)) <= 1.0,
        ]
    )


def _geo_unchecked(comp, proj, valid, cfg):
    # frozen evaluations may push a valid pixel's depth through zero; no contract check here
    c = np.where(valid, comp, 1.0)
    p = np.where(valid, proj, 1.0)
    data = np.abs(c - p) / (c + p + cfg.epsilon)
    return CostMap(np.where(valid, data, 0.0), valid.copy())


def with_poses_and_depths(inputs: WindowInputs, poses=None, depths=None) -> WindowInputs:
    """Copy of ``inputs`` with some variables replaced."""
    return WindowInputs(
        images=inputs.images,
        depths=inputs.depths if depths is None else depths,
        poses=inputs.poses if poses is None else poses,
        k=inputs.k,
        anchors=inputs.anchors,
    )


def identity_cost(target, source, cfg: LossConfig = LossConfig()) -> CostMap:
    """Photometric cost of comparing two frames without any warp."""
    target = as_image(target)
    return photometric_loss(target, source, np.ones(target.shape[:2], bool), cfg)


__all__ = [
    "AnchorDiagnostics",
    "AutoMask",
    "CostMap",
    "Gradients",
    "LossConfig",
    "LossResult",
    "SelectionResult",
    "WindowInputs",
    "auto_mask",
    "combined_cost",
    "geometric_loss",
    "identity_cost",
    "loss_gradients",
    "min_cost_select",
    "photometric_loss",
    "piece_signature",
    "same_piece",
    "smoothness_loss",
    "total_loss",
    "with_poses_and_depths",
]
