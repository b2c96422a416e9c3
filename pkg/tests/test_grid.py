import numpy as np
import pytest

from sparsepose.errors import DataError
from sparsepose.grid import (
    SparseVoxelGrid,
    coarsen,
    lift_and_filter,
    loglog_slope,
    occupancy_csv,
    occupancy_stats,
    pack_index,
    partition_windows,
    unpack_index,
    voxelize,
)


def brute_force_voxel_set(points, theta, origin):
    out = set()
    for p in np.atleast_2d(points):
        out.add(tuple(int(np.floor((p[k] - origin[k]) / theta)) for k in range(3)))
    return out


class TestPackIndex:
    def test_roundtrip_random(self):
        rng = np.random.default_rng(0)
        idx = rng.integers(-100000, 100000, size=(1000, 3))
        assert np.array_equal(unpack_index(pack_index(idx)), idx)

    def test_order_matches_lexicographic(self):
        rng = np.random.default_rng(1)
        idx = rng.integers(-50, 50, size=(500, 3))
        keys = pack_index(idx)
        by_key = np.argsort(keys)
        by_lex = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0]))
        assert np.array_equal(idx[by_key], idx[by_lex])

    def test_out_of_range_rejected(self):
        with pytest.raises(DataError):
            pack_index(np.array([[2**21, 0, 0]]))


class TestVoxelize:
    def test_single_point(self):
        g = voxelize(np.array([[0.001, 0.001, 0.001]]), 0.002, np.zeros(3))
        assert np.array_equal(g.indices, [[0, 0, 0]])
        assert g.channels == 4

    def test_boundary_point_lower_inclusive(self):
        g = voxelize(np.array([[0.002, 0.0005, 0.0005]]), 0.002, np.zeros(3))
        assert np.array_equal(g.indices, [[1, 0, 0]])

    def test_two_points_one_voxel_count_feature(self):
        pts = np.array([[0.0005, 0.0005, 0.0005], [0.0015, 0.0005, 0.0005]])
        g = voxelize(pts, 0.002, np.zeros(3))
        assert len(g) == 1
        assert g.features[0, 3] == pytest.approx(np.log(3.0))  # log(1 + 2)

    def test_mean_offset_feature(self):
        # one point at the voxel center: offset feature is exactly zero
        g = voxelize(np.array([[0.001, 0.001, 0.001]]), 0.002, np.zeros(3))
        assert np.allclose(g.features[0, :3], 0.0, atol=1e-12)

    def test_extra_channel_mean(self):
        pts = np.array([[0.0005, 0.0005, 0.0005, 1.0], [0.0015, 0.0005, 0.0005, 0.0]])
        g = voxelize(pts, 0.002, np.zeros(3))
        assert g.channels == 5
        assert g.features[0, 4] == pytest.approx(0.5)

    def test_empty_input(self):
        g = voxelize(np.zeros((0, 3)), 0.002, np.zeros(3))
        assert len(g) == 0

    def test_matches_brute_force_set(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(-0.05, 0.05, size=(500, 3))
        origin = np.array([-0.06, -0.06, -0.06])
        g = voxelize(pts, 0.004, origin)
        assert {tuple(v) for v in g.indices} == brute_force_voxel_set(pts, 0.004, origin)

    def test_indices_sorted_unique(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-0.05, 0.05, size=(300, 3))
        g = voxelize(pts, 0.004, np.array([-0.06] * 3))
        keys = pack_index(g.indices)
        assert np.all(np.diff(keys) > 0)

    def test_idempotent_on_centers(self):
        rng = np.random.default_rng(4)
        pts = rng.uniform(-0.05, 0.05, size=(400, 3))
        g = voxelize(pts, 0.004, np.array([-0.06] * 3))
        g2 = voxelize(g.centers(), 0.004, np.array([-0.06] * 3))
        assert np.array_equal(g.indices, g2.indices)


class TestCoarsen:
    def test_ten_fine_to_one_coarse(self):
        idx = np.array([[i, 0, 0] for i in range(10)])
        g = SparseVoxelGrid(0.002, np.zeros(3), idx, np.ones((10, 1)))
        coarse, parent = coarsen(g, 10)
        assert np.array_equal(coarse.indices, [[0, 0, 0]])
        assert np.array_equal(parent, np.zeros(10))

    def test_boundary_index(self):
        g = SparseVoxelGrid(0.002, np.zeros(3), np.array([[10, 0, 0]]), np.ones((1, 1)))
        coarse, _ = coarsen(g, 10)
        assert np.array_equal(coarse.indices, [[1, 0, 0]])

    def test_negative_indices_floor(self):
        g = SparseVoxelGrid(0.002, np.zeros(3), np.array([[-1, 0, 0]]), np.ones((1, 1)))
        coarse, _ = coarsen(g, 10)
        assert np.array_equal(coarse.indices, [[-1, 0, 0]])

    def test_count_matches_brute_force(self):
        rng = np.random.default_rng(5)
        idx = rng.integers(-30, 30, size=(400, 3))
        idx = np.unique(idx, axis=0)
        g = SparseVoxelGrid(0.002, np.zeros(3), idx, np.ones((len(idx), 1)))
        coarse, parent = coarsen(g, 10)
        expected = {tuple(v // 10) for v in idx}
        assert {tuple(v) for v in coarse.indices} == expected
        # parent map consistency
        assert np.array_equal(coarse.indices[parent], np.floor_divide(g.indices, 10))

    def test_mean_feature(self):
        idx = np.array([[0, 0, 0], [1, 0, 0]])
        feats = np.array([[1.0, 2.0], [3.0, 4.0]])
        g = SparseVoxelGrid(0.002, np.zeros(3), idx, feats)
        coarse, _ = coarsen(g, 10)
        assert np.allclose(coarse.features, [[2.0, 3.0]])

    def test_bad_factor_rejected(self):
        g = SparseVoxelGrid(0.002, np.zeros(3), np.array([[0, 0, 0]]), np.ones((1, 1)))
        with pytest.raises(DataError):
            coarsen(g, 1)


class TestLiftAndFilter:
    def make_fine(self, n=200, seed=6):
        rng = np.random.default_rng(seed)
        idx = np.unique(rng.integers(-25, 25, size=(n, 3)), axis=0)
        feats = rng.normal(size=(len(idx), 4))
        return SparseVoxelGrid(0.002, np.zeros(3), idx, feats)

    def test_keep_all_preserves_index_set(self):
        fine = self.make_fine()
        coarse, _ = coarsen(fine, 10)
        lifted = lift_and_filter(fine, coarse.indices, coarse.features, factor=10)
        assert np.array_equal(lifted.indices, fine.indices)
        assert lifted.channels == fine.channels + coarse.channels

    def test_keep_none_empty(self):
        fine = self.make_fine()
        lifted = lift_and_filter(fine, np.zeros((0, 3), dtype=np.int64), np.zeros((0, 4)), factor=10)
        assert len(lifted) == 0

    def test_random_keep_matches_brute_force(self):
        fine = self.make_fine()
        coarse, _ = coarsen(fine, 10)
        rng = np.random.default_rng(7)
        keep = rng.random(len(coarse)) < 0.5
        kept_idx = coarse.indices[keep]
        lifted = lift_and_filter(fine, kept_idx, coarse.features[keep], factor=10)
        kept_set = {tuple(v) for v in kept_idx}
        expected_rows = [i for i, v in enumerate(fine.indices) if tuple(v // 10) in kept_set]
        assert np.array_equal(lifted.indices, fine.indices[expected_rows])

    def test_enrichment_features_match_parent(self):
        fine = self.make_fine()
        coarse, parent = coarsen(fine, 10)
        lifted = lift_and_filter(fine, coarse.indices, coarse.features, factor=10)
        assert np.allclose(lifted.features[:, :4], fine.features)
        assert np.allclose(lifted.features[:, 4:], coarse.features[parent])


class TestPartitionWindows:
    def test_window_one_isolates_voxels(self):
        g = SparseVoxelGrid(0.002, np.zeros(3), np.array([[0, 0, 0], [1, 0, 0]]), np.ones((2, 1)))
        parts = partition_windows(g, 1)
        assert len(parts) == 2
        assert all(len(rows) == 1 for _, rows in parts)

    def test_same_window(self):
        g = SparseVoxelGrid(0.002, np.zeros(3), np.array([[0, 0, 0], [3, 3, 3]]), np.ones((2, 1)))
        parts = partition_windows(g, 4)
        assert len(parts) == 1
        assert np.array_equal(parts[0][1], [0, 1])

    def test_is_partition(self):
        rng = np.random.default_rng(8)
        idx = np.unique(rng.integers(-20, 20, size=(300, 3)), axis=0)
        g = SparseVoxelGrid(0.002, np.zeros(3), idx, np.ones((len(idx), 1)))
        parts = partition_windows(g, 4)
        all_rows = np.concatenate([rows for _, rows in parts])
        assert len(all_rows) == len(g)
        assert len(np.unique(all_rows)) == len(g)

    def test_membership_matches_floor_division(self):
        rng = np.random.default_rng(9)
        idx = np.unique(rng.integers(-20, 20, size=(200, 3)), axis=0)
        g = SparseVoxelGrid(0.002, np.zeros(3), idx, np.ones((len(idx), 1)))
        for wid, rows in partition_windows(g, 5):
            for r in rows:
                assert tuple(np.floor_divide(g.indices[r], 5)) == wid


class TestOccupancyStats:
    def test_single_point(self):
        rows = occupancy_stats(np.array([[0.001, 0.001, 0.001]]), (0.1, 0.1, 0.1), [0.002, 0.004])
        assert all(r["sparse"] == 1 for r in rows)

    def test_dense_cubic(self):
        rows = occupancy_stats(np.zeros((1, 3)), (0.064, 0.064, 0.064), [0.002, 0.001])
        assert rows[1]["dense"] == 8 * rows[0]["dense"]

    def test_plane_slope_near_two(self):
        # a planar sheet of points: sparse count should scale ~ (1/theta)^2
        rng = np.random.default_rng(10)
        pts = np.column_stack([rng.uniform(0, 0.256, size=40000),
                               rng.uniform(0, 0.256, size=40000),
                               np.full(40000, 0.01)])
        thetas = [0.008, 0.004, 0.002]
        rows = occupancy_stats(pts, (0.256, 0.256, 0.064), thetas)
        slope = loglog_slope([1.0 / t for t in thetas], [r["sparse"] for r in rows])
        assert 1.6 <= slope <= 2.4
        dense_slope = loglog_slope([1.0 / t for t in thetas], [r["dense"] for r in rows])
        assert dense_slope == pytest.approx(3.0, abs=1e-9)

    def test_csv_format(self):
        rows = occupancy_stats(np.array([[0.001, 0.001, 0.001]]), (0.1, 0.1, 0.1), [0.002])
        text = occupancy_csv(rows)
        assert text.splitlines()[0] == "theta_mm,sparse,dense,ratio"
        assert text.splitlines()[1].startswith("2,1,")
