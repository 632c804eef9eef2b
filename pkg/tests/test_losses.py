import numpy as np
import pytest

from physvo.errors import ContractViolation, InvalidArgumentError
from physvo.geometry import DepthMap, Intrinsics, Pose, warp
from physvo.losses import (
    CostMap,
    LossConfig,
    WindowInputs,
    auto_mask,
    combined_cost,
    geometric_loss,
    identity_cost,
    loss_gradients,
    min_cost_select,
    photometric_loss,
    smoothness_loss,
    total_loss,
)
from physvo.photometric import ssim_map
from physvo.synth import make_sequence, textured_wall_scene

ONES = np.ones((6, 7), dtype=bool)


def cmap(x, valid=None):
    x = np.asarray(x, dtype=float)
    return CostMap(x, np.ones(x.shape, bool) if valid is None else valid)


# -- photometric -------------------------------------------------------------


def test_photo_identical_images_zero():
    img = np.random.default_rng(0).uniform(size=(6, 7))
    assert np.allclose(photometric_loss(img, img, ONES).data, 0.0, atol=1e-12)


def test_photo_pure_l1_offset():
    img = np.random.default_rng(1).uniform(0, 0.8, size=(6, 7))
    c = photometric_loss(img, img + 0.1, ONES, LossConfig(mu=0.0))
    assert np.allclose(c.data, 0.1, atol=1e-12)


def test_photo_matches_composition_oracle():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(2, 6, 7))
    got = photometric_loss(a, b, ONES).data
    ref = 0.85 * (1 - ssim_map(a, b)) / 2 + 0.15 * np.abs(a - b)
    assert np.allclose(got, ref, atol=1e-10, rtol=0)


def test_photo_invalid_pixels_do_not_leak():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(size=(2, 6, 7))
    valid = ONES.copy()
    valid[2, 3] = False
    b2 = b.copy()
    b2[2, 3] = 1e6  # garbage where the warp was invalid
    c1 = photometric_loss(a, b, valid).data
    c2 = photometric_loss(a, b2, valid).data
    assert np.array_equal(c1, c2) and c1[2, 3] == 0.0


def test_photo_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        photometric_loss(np.zeros((6, 7)), np.zeros((6, 6)), ONES)


# -- geometric ---------------------------------------------------------------


def test_geo_equal_depths_zero():
    d = np.random.default_rng(4).uniform(1, 5, size=(6, 7))
    assert not geometric_loss(d, d, ONES).data.any()


def test_geo_substitution():
    c = geometric_loss(np.ones((1, 1)), np.full((1, 1), 3.0), np.ones((1, 1), bool))
    assert c.data[0, 0] == 2.0 / (4.0 + 1e-7)


def test_geo_rejects_nonpositive_depth():
    with pytest.raises(ContractViolation):
        geometric_loss(np.zeros((2, 2)), np.ones((2, 2)), np.ones((2, 2), bool))


def test_geo_ignores_invalid_pixels():
    valid = np.array([[True, False]])
    c = geometric_loss(np.array([[1.0, -4.0]]), np.array([[2.0, 0.0]]), valid)
    assert c.data[0, 1] == 0.0


# -- combined / selection / auto-mask ---------------------------------------


def test_combined_arithmetic():
    c = combined_cost(cmap([[0.2]]), cmap([[0.1]]), LossConfig(lambda_geo=0.5))
    assert c.data[0, 0] == pytest.approx(0.25, abs=1e-15)


def test_combined_zero_weight_is_photo():
    rng = np.random.default_rng(5)
    p, g = rng.uniform(size=(2, 4, 4))
    assert np.array_equal(combined_cost(cmap(p), cmap(g), LossConfig(lambda_geo=0.0)).data, p)


def test_combined_matches_oracle_bitwise():
    rng = np.random.default_rng(6)
    p, g = rng.uniform(size=(2, 5, 5))
    got = combined_cost(cmap(p), cmap(g)).data
    for i in range(5):
        for j in range(5):
            assert got[i, j] == p[i, j] + 0.5 * g[i, j]


def test_combined_mask_mismatch():
    v = np.ones((2, 2), bool)
    w = v.copy()
    w[0, 0] = False
    with pytest.raises(ContractViolation):
        combined_cost(cmap(np.zeros((2, 2)), v), cmap(np.zeros((2, 2)), w))


def test_select_single_source():
    x = np.random.default_rng(7).uniform(size=(3, 3))
    r = min_cost_select([cmap(x)])
    assert np.array_equal(r.cost, x) and (r.source_index == 0).all()


def test_select_two_sources():
    r = min_cost_select([cmap([[0.5]]), cmap([[0.2]])])
    assert r.cost[0, 0] == 0.2 and r.source_index[0, 0] == 1


def test_select_skips_invalid_and_flags_empty():
    a = cmap([[0.1, 0.3]], np.array([[False, False]]))
    b = cmap([[0.9, 0.4]], np.array([[True, False]]))
    r = min_cost_select([a, b])
    assert r.source_index.tolist() == [[1, -1]] and r.valid.tolist() == [[True, False]]


def test_select_empty_list():
    with pytest.raises(InvalidArgumentError):
        min_cost_select([])


def test_automask_static_camera_keeps_nothing():
    img = np.random.default_rng(8).uniform(size=(6, 7))
    photo = photometric_loss(img, img, ONES)
    ident = identity_cost(img, img)
    assert not auto_mask([photo], [ident]).keep.any()


def test_automask_strict_inequality():
    m = auto_mask([cmap([[0.3, 0.2]])], [cmap([[0.3, 0.3]])])
    assert m.keep.tolist() == [[False, True]]


def test_automask_mismatched_lists():
    with pytest.raises(InvalidArgumentError):
        auto_mask([cmap([[0.1]])], [])


def test_automask_keeps_textured_pixels_under_perfect_warp():
    k = Intrinsics(48.0, 48.0, 31.5, 23.5, 64, 48)
    poses = [Pose(), Pose(np.eye(3), np.array([0.3, 0.0, 0.0]))]
    t, s = make_sequence(textured_wall_scene(), poses, k)
    wr = warp(t.depth, poses[1].inverse() @ poses[0], k, s.image, s.depth)
    photo = photometric_loss(t.image, wr.image, wr.valid)
    ident = identity_cost(t.image, s.image)
    keep = auto_mask([photo], [ident]).keep
    textured = wr.valid & (ident.data > 1e-2)
    assert keep[textured].mean() > 0.99


# -- smoothness --------------------------------------------------------------


def test_smooth_constant_depth_zero():
    assert not smoothness_loss(np.full((6, 7), 4.0), np.random.default_rng(9).uniform(size=(6, 7))).data.any()


def test_smooth_disparity_ramp_closed_form():
    h = 0.01
    disp = 0.2 + h * np.arange(8)
    depth = np.tile(1.0 / disp, (5, 1))
    c = smoothness_loss(depth, np.full((5, 8), 0.5)).data
    assert np.allclose(c[:, :-1], h / disp.mean(), atol=1e-12)


def test_smooth_all_invalid():
    with pytest.raises(ContractViolation):
        smoothness_loss(DepthMap(np.zeros((3, 3))), np.zeros((3, 3)))


# -- window objective --------------------------------------------------------


@pytest.fixture(scope="module")
def wall_window():
    k = Intrinsics(64.0, 64.0, 31.5, 23.5, 64, 48)
    poses = [Pose(np.eye(3), np.array([0.125 * i, 0.125 * (i % 2), 0.0])) for i in range(3)]
    frames = make_sequence(textured_wall_scene(), poses, k)
    return WindowInputs([f.image for f in frames], [f.depth for f in frames], poses, k, [0, 1, 2])


def test_ground_truth_loss_near_zero(wall_window):
    g = loss_gradients(wall_window)
    assert g.result.loss < 1e-3 and not g.result.degenerate


def test_reduction_identity_single_pair(wall_window):
    w = wall_window
    cfg = LossConfig(lambda_smooth=0.0)
    inp = WindowInputs(w.images[:2], w.depths[:2], w.poses[:2], w.k, [0])
    wr = warp(w.depths[0], inp.relative_pose(0, 1), w.k, w.images[1], w.depths[1])
    cost = combined_cost(
        photometric_loss(w.images[0], wr.image, wr.valid),
        geometric_loss(wr.comp_depth, wr.proj_depth, wr.valid),
    )
    keep = auto_mask([photometric_loss(w.images[0], wr.image, wr.valid)], [identity_cost(w.images[0], w.images[1])]).keep
    v = cost.valid & keep
    assert total_loss(inp, cfg).loss == pytest.approx(cost.data[v].mean(), rel=1e-12)


def test_static_window_degenerate():
    k = Intrinsics(24.0, 24.0, 15.5, 11.5, 32, 24)
    f = make_sequence(textured_wall_scene(), [Pose(), Pose()], k)
    res = total_loss(WindowInputs([x.image for x in f], [x.depth for x in f], [Pose(), Pose()], k, [0, 1]))
    assert res.degenerate and res.loss == 0.0


def test_loss_rises_along_any_pose_ray(wall_window):
    # true pose is a local minimum: moving a source camera raises the loss
    w = wall_window
    base = total_loss(w).loss
    rng = np.random.default_rng(10)
    for _ in range(6):
        xi = rng.normal(size=6)
        xi *= 0.02 / np.linalg.norm(xi)
        poses = list(w.poses)
        poses[2] = poses[2] @ Pose.exp(xi)
        moved = WindowInputs(w.images, w.depths, poses, w.k, w.anchors)
        assert total_loss(moved).loss > base


def test_bad_anchor_list(wall_window):
    w = wall_window
    with pytest.raises(InvalidArgumentError):
        WindowInputs(w.images, w.depths, w.poses, w.k, [0, 0])
