import numpy as np
import pytest

from sparsepose.errors import DataError
from sparsepose.grid import SparseVoxelGrid, voxelize
from sparsepose.heatmap import (
    HeatmapParams,
    SceneGroundTruth,
    adaptive_topk,
    class_weights,
    conditioning_bias,
    focal_loss,
    gaussian_focal_loss,
    objectness_target,
    roi_target,
    soft_suppress,
    voxel_object_assignment,
    weighted_cross_entropy,
)


def grid_from_indices(indices, theta=0.02, origin=(0.0, 0.0, 0.0)):
    idx = np.atleast_2d(np.asarray(indices, dtype=np.int64))
    return SparseVoxelGrid(theta, np.asarray(origin, dtype=np.float64), idx, np.ones((len(idx), 1)))


def fd_gradient(fn, x, eps=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


class TestRoiTarget:
    def test_empty_gt_all_zero(self):
        grid = grid_from_indices([[0, 0, 0], [1, 1, 1]])
        gt = SceneGroundTruth(np.zeros((0, 3)), [], np.zeros(0, dtype=np.int64))
        H = roi_target(grid, gt, HeatmapParams())
        assert np.array_equal(H, np.zeros(2))

    def test_voxel_on_centroid_and_surface_scores_one(self):
        grid = grid_from_indices([[0, 0, 0]])
        center = grid.centers()[0]
        gt = SceneGroundTruth(center[None, :], [center[None, :]], np.array([1]))
        H = roi_target(grid, gt, HeatmapParams())
        assert H[0] == pytest.approx(1.0)

    def test_analytic_distance_weighting(self):
        # voxel at a centroid, nearest boundary point 2 coarse-voxel units away,
        # sigma_c = 6, sigma_b = 4:  H = (1 + exp(-4/16)) / 2 ~ 0.8894
        grid = grid_from_indices([[0, 0, 0]], theta=0.02)
        center = grid.centers()[0]
        boundary = center + np.array([2 * 0.02, 0.0, 0.0])
        gt = SceneGroundTruth(center[None, :], [boundary[None, :]], np.array([1]))
        H = roi_target(grid, gt, HeatmapParams(sigma_c=6.0, sigma_b=4.0))
        expected = 0.5 * (1.0 + np.exp(-4.0 / 16.0))
        assert H[0] == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(0.8894, abs=5e-5)

    def test_range_and_monotonicity(self):
        rng = np.random.default_rng(0)
        grid = grid_from_indices(rng.integers(-10, 10, size=(100, 3)))
        c = rng.uniform(-0.1, 0.1, size=(2, 3))
        clouds = [rng.uniform(-0.1, 0.1, size=(50, 3)) for _ in range(2)]
        gt = SceneGroundTruth(c, clouds, np.array([1, 2]))
        params = HeatmapParams()
        H = roi_target(grid, gt, params)
        assert np.all((H >= 0) & (H <= 1))
        # recompute via the definition with explicit min distances
        pos = grid.centers() / grid.resolution
        d_c = np.min(np.linalg.norm(pos[:, None, :] - c[None] / grid.resolution, axis=2), axis=1)
        allpts = np.concatenate(clouds) / grid.resolution
        d_b = np.min(np.linalg.norm(pos[:, None, :] - allpts[None], axis=2), axis=1)
        brute = 0.5 * (np.exp(-d_c**2 / params.sigma_c**2) + np.exp(-d_b**2 / params.sigma_b**2))
        assert np.allclose(H, brute, atol=1e-12)


class TestGaussianFocalLoss:
    def test_perfect_positive_limit(self):
        loss, _ = gaussian_focal_loss(np.array([1.0 - 1e-9]), np.array([1.0]))
        assert loss < 1e-6

    def test_perfect_negative_limit(self):
        loss, _ = gaussian_focal_loss(np.array([1e-9]), np.array([0.0]))
        assert loss < 1e-6

    def test_analytic_value(self):
        # H = 1, p = 0.5, gamma = 2: L = 0.25 ln 2
        loss, _ = gaussian_focal_loss(np.array([0.5]), np.array([1.0]), alpha=4.0, gamma=2.0)
        assert loss == pytest.approx(0.25 * np.log(2.0), abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        p = rng.uniform(0.05, 0.95, size=24)
        h = rng.uniform(0.0, 1.0, size=24)
        _, grad = gaussian_focal_loss(p, h)
        num = fd_gradient(lambda x: gaussian_focal_loss(x, h)[0], p.copy())
        denom = np.maximum(1.0, np.maximum(np.abs(grad), np.abs(num)))
        assert np.max(np.abs(grad - num) / denom) < 1e-6

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DataError):
            gaussian_focal_loss(np.zeros(3), np.zeros(4))


class TestSoftSuppress:
    def test_at_epsilon_half(self):
        params = HeatmapParams(beta=10.0, epsilon=0.3)
        a, _ = soft_suppress(np.array([0.3]), params)
        assert a[0] == pytest.approx(0.5)

    def test_large_beta_step(self):
        params = HeatmapParams(beta=1e4, epsilon=0.3)
        a, _ = soft_suppress(np.array([0.299, 0.301]), params)
        assert a[0] < 1e-4
        assert a[1] > 1 - 1e-4

    def test_analytic_keep(self):
        params = HeatmapParams(beta=10.0, epsilon=0.3, kappa=0.5)
        a, kept = soft_suppress(np.array([0.8]), params)
        assert a[0] == pytest.approx(1.0 / (1.0 + np.exp(-5.0)), abs=1e-9)
        assert a[0] == pytest.approx(0.99331, abs=5e-6)
        assert list(kept) == [0]

    def test_keep_set_monotone_in_kappa(self):
        rng = np.random.default_rng(2)
        scores = rng.random(200)
        base = HeatmapParams()
        k1 = set(soft_suppress(scores, HeatmapParams(beta=base.beta, epsilon=base.epsilon, kappa=0.3))[1])
        k2 = set(soft_suppress(scores, HeatmapParams(beta=base.beta, epsilon=base.epsilon, kappa=0.7))[1])
        assert k2 <= k1


class TestObjectnessTarget:
    def test_empty_gt(self):
        grid = grid_from_indices([[0, 0, 0]])
        gt = SceneGroundTruth(np.zeros((0, 3)), [], np.zeros(0, dtype=np.int64))
        assert np.array_equal(objectness_target(grid, gt), np.zeros(1))

    def test_voxel_with_model_point(self):
        grid = grid_from_indices([[0, 0, 0], [5, 5, 5]], theta=0.02)
        pt = grid.centers()[0]
        gt = SceneGroundTruth(pt[None, :], [pt[None, :]], np.array([1]))
        y = objectness_target(grid, gt)
        assert y[0] == 1.0 and y[1] == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-0.1, 0.1, size=(300, 3))
        fine = voxelize(pts, 0.01, np.array([-0.12] * 3))
        cloud = rng.uniform(-0.1, 0.1, size=(80, 3))
        gt = SceneGroundTruth(cloud.mean(axis=0, keepdims=True), [cloud], np.array([1]))
        y = objectness_target(fine, gt)
        occupied = {tuple(v) for v in np.floor((cloud + 0.12) / 0.01).astype(np.int64)}
        brute = np.array([1.0 if tuple(v) in occupied else 0.0 for v in fine.indices])
        assert np.array_equal(y, brute)


class TestFocalLoss:
    def test_perfect_prediction(self):
        y = np.array([1.0, 0.0])
        p = np.array([1.0 - 1e-9, 1e-9])
        loss, _ = focal_loss(p, y)
        assert loss < 1e-6

    def test_analytic_positive(self):
        # y=1, p=0.5: alpha * 0.25 * ln 2 per voxel
        loss, _ = focal_loss(np.array([0.5]), np.array([1.0]), gamma_f=2.0, alpha_f=0.25)
        assert loss == pytest.approx(0.25 * 0.25 * np.log(2.0), abs=1e-12)
        assert loss == pytest.approx(0.04332, abs=5e-6)

    def test_analytic_negative(self):
        # y=0, p=0.5 with one positive elsewhere for normalization
        p = np.array([0.5, 1.0 - 1e-12])
        y = np.array([0.0, 1.0])
        loss, _ = focal_loss(p, y, gamma_f=2.0, alpha_f=0.25)
        assert loss == pytest.approx(0.75 * 0.25 * np.log(2.0), abs=1e-9)
        assert loss == pytest.approx(0.12997, abs=5e-5)  # (1-0.25) * 0.25 * ln 2

    def test_normalized_by_positive_count(self):
        p = np.full(8, 0.5)
        y = np.zeros(8)
        y[:2] = 1.0
        loss, _ = focal_loss(p, y)
        per_pos = 0.25 * 0.25 * np.log(2.0)
        per_neg = 0.75 * 0.25 * np.log(2.0)
        assert loss == pytest.approx((2 * per_pos + 6 * per_neg) / 2, abs=1e-9)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        p = rng.uniform(0.05, 0.95, size=20)
        y = (rng.random(20) < 0.3).astype(float)
        _, grad = focal_loss(p, y)
        num = fd_gradient(lambda x: focal_loss(x, y)[0], p.copy())
        denom = np.maximum(1.0, np.maximum(np.abs(grad), np.abs(num)))
        assert np.max(np.abs(grad - num) / denom) < 1e-6


class TestAdaptiveTopk:
    def test_ratio_one_identity(self):
        rng = np.random.default_rng(5)
        idx = np.unique(rng.integers(0, 10, size=(20, 3)), axis=0)
        scores = rng.random(len(idx))
        kept, k = adaptive_topk(scores, idx, ratio=1.0)
        assert k == len(idx)
        assert np.array_equal(kept, np.arange(len(idx)))

    def test_distinct_scores_top_half(self):
        idx = np.array([[i, 0, 0] for i in range(10)])
        scores = np.arange(10, dtype=float)
        kept, k = adaptive_topk(scores, idx, ratio=0.5, k_min=1)
        assert k == 5
        assert set(kept) == {5, 6, 7, 8, 9}

    def test_tie_break_lexicographic(self):
        idx = np.array([[5, 0, 0], [1, 0, 0], [3, 0, 0], [2, 0, 0]])
        scores = np.array([1.0, 1.0, 1.0, 0.5])
        kept, k = adaptive_topk(scores, idx, ratio=0.5, k_min=1)
        # stable-sort oracle: sort by (-score, lex index), keep first 2
        lex_order = sorted(range(4), key=lambda i: (-(scores[i]), tuple(idx[i])))
        expected = sorted(lex_order[:2])
        assert k == 2
        assert list(kept) == expected
        assert {tuple(idx[i]) for i in kept} == {(1, 0, 0), (3, 0, 0)}

    def test_clamping(self):
        idx = np.array([[i, 0, 0] for i in range(10)])
        scores = np.arange(10, dtype=float)
        _, k = adaptive_topk(scores, idx, ratio=0.01, k_min=3)
        assert k == 3
        _, k = adaptive_topk(scores, idx, ratio=1.0, k_max=4)
        assert k == 4

    def test_permutation_invariant(self):
        rng = np.random.default_rng(6)
        idx = np.unique(rng.integers(0, 20, size=(30, 3)), axis=0)
        scores = rng.choice([0.1, 0.5, 0.9], size=len(idx))
        kept, _ = adaptive_topk(scores, idx, ratio=0.4)
        kept_set = {tuple(idx[i]) for i in kept}
        perm = rng.permutation(len(idx))
        kept2, _ = adaptive_topk(scores[perm], idx[perm], ratio=0.4)
        kept2_set = {tuple(idx[perm][i]) for i in kept2}
        assert kept_set == kept2_set

    def test_empty_input(self):
        kept, k = adaptive_topk(np.zeros(0), np.zeros((0, 3)), ratio=0.5)
        assert k == 0 and len(kept) == 0


class TestClassWeightsAndWce:
    def test_inverse_frequency_weights(self):
        # frequencies (90, 10): raw inverse-frequency weights N/(K N_c)
        # are (0.5556, 5.0); after mean-1 normalization (0.2, 1.8)
        labels = np.array([0] * 90 + [1] * 10)
        w = class_weights(labels, 2)
        raw = np.array([100 / (2 * 90), 100 / (2 * 10)])
        assert raw == pytest.approx([0.5556, 5.0], abs=5e-4)
        assert np.allclose(w, raw / raw.mean())
        assert w.mean() == pytest.approx(1.0)

    def test_one_hot_correct_logits_vanish(self):
        labels = np.array([0, 1, 2])
        logits = np.eye(3) * 50.0
        loss, _ = weighted_cross_entropy(logits, labels)
        assert loss < 1e-12

    def test_uniform_logits_log_k(self):
        labels = np.array([0, 1, 2, 3])
        logits = np.zeros((4, 4))
        loss, _ = weighted_cross_entropy(logits, labels)
        assert loss == pytest.approx(np.log(4.0), abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        logits = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, size=6)
        w = class_weights(labels, 4)
        _, grad = weighted_cross_entropy(logits, labels, w)
        num = fd_gradient(lambda z: weighted_cross_entropy(z, labels, w)[0], logits.copy())
        denom = np.maximum(1.0, np.maximum(np.abs(grad), np.abs(num)))
        assert np.max(np.abs(grad - num) / denom) < 1e-6


class TestConditioningBias:
    def test_zero_projection(self):
        f = np.random.default_rng(8).normal(size=(5, 4))
        assert np.array_equal(conditioning_bias(f, np.zeros((4, 6))), np.zeros((5, 6)))

    def test_identity_projection(self):
        f = np.random.default_rng(9).normal(size=(5, 4))
        assert np.allclose(conditioning_bias(f, np.eye(4)), f)

    def test_matches_naive_matmul(self):
        rng = np.random.default_rng(10)
        f = rng.normal(size=(7, 5))
        P = rng.normal(size=(5, 3))
        naive = np.zeros((7, 3))
        for i in range(7):
            for j in range(3):
                naive[i, j] = sum(f[i, k] * P[k, j] for k in range(5))
        assert np.allclose(conditioning_bias(f, P), naive, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DataError):
            conditioning_bias(np.zeros((3, 4)), np.zeros((5, 2)))


class TestVoxelObjectAssignment:
    def test_majority_ownership(self):
        grid = grid_from_indices([[0, 0, 0]], theta=0.1)
        center = grid.centers()[0]
        # object 0 has 1 point in the voxel, object 1 has 3
        c0 = center[None, :]
        c1 = np.tile(center, (3, 1)) + np.array([[0.001, 0, 0], [0, 0.001, 0], [0, 0, 0.001]])
        gt = SceneGroundTruth(np.stack([center + 1.0, center]), [c0, c1], np.array([1, 2]))
        owner = voxel_object_assignment(grid, gt)
        assert owner[0] == 1

    def test_background_unassigned(self):
        grid = grid_from_indices([[0, 0, 0], [50, 50, 50]], theta=0.01)
        pt = grid.centers()[0]
        gt = SceneGroundTruth(pt[None, :], [pt[None, :]], np.array([1]))
        owner = voxel_object_assignment(grid, gt)
        assert owner[1] == -1
