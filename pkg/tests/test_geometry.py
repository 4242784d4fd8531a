import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunematch.data import SceneConfig, generate_pair, intrinsics
from prunematch.errors import InputShapeError
from prunematch.geometry import (
    PairSample,
    Pose,
    apply_homography,
    cell_anchors,
    cell_of,
    coarse_shape,
    covisible_labels,
    depth_validity,
    fine_gt_points,
    gt_coarse_assignment,
    homography_consistency,
    pixel_grid,
    plane_homography,
    selected_covisible_labels,
    warp_points,
)


def translated_plane(shift_px=(0.0, 0.0), size=(32, 32), z=4.0, holes=None):
    """Fronto-parallel plane at depth z seen by two cameras related by an x/y translation."""
    K = intrinsics(size)
    f = K[0, 0]
    t = np.array([shift_px[0] * z / f, shift_px[1] * z / f, 0.0])
    pose = Pose(np.eye(3), t)
    depth = np.full(size, z)
    depth_a = depth.copy()
    if holes is not None:
        depth_a[holes] = 0.0
    img = np.zeros(size)
    return PairSample(img, img, depth_a, depth.copy(), pose, K, K.copy(), plane_homography(pose, K, K, z))


class TestCells:
    def test_anchor_convention(self):
        np.testing.assert_array_equal(cell_anchors(2, 3), [[4, 4], [12, 4], [20, 4], [4, 12], [12, 12], [20, 12]])

    def test_cell_of_round_trip(self):
        anchors = cell_anchors(4, 5)
        np.testing.assert_array_equal(cell_of(anchors, (32, 40)), np.arange(20))
        assert cell_of(np.array([[-1.0, 3.0], [40.0, 0.0]]), (32, 40)).tolist() == [-1, -1]

    def test_rejects_bad_size(self):
        with pytest.raises(InputShapeError):
            coarse_shape((30, 32))


class TestDepthValidity:
    def test_constant(self):
        np.testing.assert_array_equal(depth_validity(np.ones((16, 24))), np.ones(6))
        np.testing.assert_array_equal(depth_validity(np.zeros((16, 24))), np.zeros(6))

    @pytest.mark.parametrize("period", [1, 3, 8])
    def test_checkerboard_against_cell_loop(self, period):
        ys, xs = np.mgrid[0:40, 0:48]
        depth = (((ys // period) + (xs // period)) % 2).astype(float) * 2.5
        expected = []
        for r in range(5):
            for c in range(6):
                expected.append(1.0 if depth[8 * r + 4, 8 * c + 4] > 0 else 0.0)
        np.testing.assert_array_equal(depth_validity(depth), expected)


class TestWarpPoints:
    def test_identity(self):
        s = translated_plane()
        pts = pixel_grid(s.shape)
        out, vis = warp_points(pts, s.depth_a, s.pose_ab, s.K_a, s.K_b)
        np.testing.assert_allclose(out, pts, atol=1e-12)
        assert vis.all()

    def test_translation_shift_formula(self):
        z, f, t = 4.0, 32.0, 0.5
        s = translated_plane()
        pose = Pose(np.eye(3), np.array([t, 0.0, 0.0]))
        out, _ = warp_points([[10.0, 7.0]], s.depth_a, pose, s.K_a, s.K_b)
        np.testing.assert_allclose(out, [[10.0 + f * t / z, 7.0]], atol=1e-12)

    def test_zero_depth_invisible(self):
        s = translated_plane(holes=(slice(0, 8), slice(0, 8)))
        _, vis = warp_points([[3.0, 3.0], [20.0, 20.0]], s.depth_a, s.pose_ab, s.K_a, s.K_b)
        assert vis.tolist() == [False, True]

    def test_outside_target_invisible(self):
        s = translated_plane(shift_px=(10.0, 0.0))
        _, vis = warp_points([[25.0, 5.0], [5.0, 5.0]], s.depth_a, s.pose_ab, s.K_a, s.K_b)
        assert vis.tolist() == [False, True]

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31))
    def test_inverse_pose_round_trip(self, seed):
        s = generate_pair(SceneConfig(image_size=(32, 32), invalid_depth_fraction=0.0, seed=seed))
        pts = pixel_grid(s.shape)
        fwd, vis = warp_points(pts, s.depth_a, s.pose_ab, s.K_a, s.K_b)
        # depth at a sub-pixel point of B is the plane depth there, computed exactly
        cam_b = s.pose_ab.apply(np.hstack([pts[vis], np.ones((vis.sum(), 1))]) @ np.linalg.inv(s.K_a).T
                                * s.depth_a.ravel()[vis][:, None])
        back_h = np.hstack([fwd[vis], np.ones((vis.sum(), 1))]) @ np.linalg.inv(s.K_b).T * cam_b[:, 2:3]
        back = s.pose_ab.inverse().apply(back_h) @ s.K_a.T
        np.testing.assert_allclose(back[:, :2] / back[:, 2:3], pts[vis], atol=1e-8)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31))
    def test_matches_homography(self, seed):
        s = generate_pair(SceneConfig(image_size=(32, 32), seed=seed))
        assert homography_consistency(s) < 1e-6


class TestCovisibility:
    def test_identity_total(self):
        s = translated_plane()
        idx = np.arange(16)
        for mode in ("pointwise", "bbox"):
            la, lb = covisible_labels(s, idx, idx, mode)
            assert la.all() and lb.all()

    def test_no_overlap(self):
        s = translated_plane(shift_px=(40.0, 0.0))
        idx = np.arange(16)
        for mode in ("pointwise", "bbox"):
            la, lb = covisible_labels(s, idx, idx, mode)
            assert not la.any() and not lb.any()

    def test_half_overlap(self):
        s = translated_plane(shift_px=(16.0, 0.0))
        la, lb = covisible_labels(s, np.arange(16), np.arange(16), "pointwise")
        cols = np.arange(16) % 4
        np.testing.assert_array_equal(la, cols < 2)
        np.testing.assert_array_equal(lb, cols >= 2)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31))
    def test_bbox_superset(self, seed):
        s = generate_pair(SceneConfig(image_size=(32, 32), max_translation=1.0, max_rotation_deg=20.0, seed=seed))
        idx = np.arange(16)
        pa, pb = covisible_labels(s, idx, idx, "pointwise")
        ba, bb = covisible_labels(s, idx, idx, "bbox")
        assert np.all(ba >= pa) and np.all(bb >= pb)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            covisible_labels(translated_plane(), [0], [0], "dense")

    def test_selected_needs_surviving_counterpart(self):
        s = translated_plane(shift_px=(16.0, 0.0))
        ia, ib = np.arange(16), np.array([2, 6, 10, 14])
        la, lb = selected_covisible_labels(s, ia, ib)
        np.testing.assert_array_equal(la, ia % 4 == 0)
        np.testing.assert_array_equal(lb, np.ones(4))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31))
    def test_selected_subset_of_pointwise(self, seed):
        s = generate_pair(SceneConfig(image_size=(32, 32), max_translation=1.0, max_rotation_deg=20.0, seed=seed))
        rng = np.random.default_rng(seed)
        ia, ib = np.sort(rng.choice(16, 8, replace=False)), np.sort(rng.choice(16, 8, replace=False))
        pa, pb = covisible_labels(s, ia, ib, "pointwise")
        sa, sb = selected_covisible_labels(s, ia, ib)
        assert np.all(sa <= pa) and np.all(sb <= pb)
        full_a, full_b = selected_covisible_labels(s, np.arange(16), np.arange(16))
        np.testing.assert_array_equal(full_a, covisible_labels(s, np.arange(16), np.arange(16), "pointwise")[0])


def assignment_oracle(sample, ia, ib):
    hc, wc = coarse_shape(sample.shape)
    h, w = sample.shape

    def target(cell, depth, pose, Ks, Kd):
        r, c = divmod(int(cell), wc)
        x, y = 8 * c + 4, 8 * r + 4
        z = depth[y, x]
        if z <= 0:
            return -1
        X = np.linalg.inv(Ks) @ np.array([x, y, 1.0]) * z
        Y = Kd @ (pose.R @ X + pose.t)
        if Y[2] <= 0:
            return -1
        u, v = Y[0] / Y[2], Y[1] / Y[2]
        px, py = int(np.floor(u + 0.5)), int(np.floor(v + 0.5))
        if not (0 <= px < w and 0 <= py < h):
            return -1
        return (py // 8) * wc + px // 8

    out = np.zeros((len(ia), len(ib)))
    for i, a in enumerate(ia):
        for j, b in enumerate(ib):
            if target(a, sample.depth_a, sample.pose_ab, sample.K_a, sample.K_b) == b and \
                    target(b, sample.depth_b, sample.pose_ab.inverse(), sample.K_b, sample.K_a) == a:
                out[i, j] = 1
    return out


class TestCoarseAssignment:
    def test_identity_on_shared_indices(self):
        s = translated_plane()
        ia, ib = np.array([0, 5, 7, 9]), np.array([9, 1, 5])
        gt = gt_coarse_assignment(s, ia, ib)
        expected = np.zeros((4, 3))
        expected[1, 2] = expected[3, 0] = 1
        np.testing.assert_array_equal(gt, expected)

    def test_half_cell_shift(self):
        s = translated_plane(shift_px=(4.0, 0.0))
        idx = np.arange(16)
        np.testing.assert_array_equal(gt_coarse_assignment(s, idx, idx), assignment_oracle(s, idx, idx))

    def test_identity_full_on_valid_cells(self):
        s = generate_pair(SceneConfig(image_size=(32, 32), seed=3).identity())
        idx = np.arange(16)
        valid = depth_validity(s.depth_a) * depth_validity(s.depth_b)
        np.testing.assert_array_equal(gt_coarse_assignment(s, idx, idx), np.diag(valid))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31))
    def test_at_most_one_per_row_and_column(self, seed):
        s = generate_pair(SceneConfig(image_size=(32, 32), max_rotation_deg=15.0, seed=seed))
        rng = np.random.default_rng(seed)
        ia, ib = rng.permutation(16)[:10], rng.permutation(16)[:12]
        gt = gt_coarse_assignment(s, ia, ib)
        assert gt.sum(0).max() <= 1 and gt.sum(1).max() <= 1
        np.testing.assert_array_equal(gt, assignment_oracle(s, ia, ib))


class TestHomography:
    def test_identity(self):
        s = translated_plane()
        np.testing.assert_allclose(s.homography, np.eye(3), atol=1e-15)

    def test_fine_points_follow_homography(self):
        s = generate_pair(SceneConfig(image_size=(32, 32), invalid_depth_fraction=0.0, seed=11))
        pts = fine_gt_points(s, np.arange(16))
        ok = np.all(np.isfinite(pts), axis=1)
        np.testing.assert_allclose(pts[ok], apply_homography(s.homography, cell_anchors(4, 4)[ok]), atol=1e-9)

    def test_check_rejects_wrong_homography(self):
        s = translated_plane(shift_px=(3.0, 0.0))
        s.homography = np.eye(3)
        with pytest.raises(ValueError):
            s.check()

    def test_swapped_inverts(self):
        s = generate_pair(SceneConfig(image_size=(32, 32), seed=2))
        t = s.swapped()
        t.check()
        np.testing.assert_allclose(t.homography @ s.homography / (t.homography @ s.homography)[2, 2], np.eye(3),
                                   atol=1e-12)
