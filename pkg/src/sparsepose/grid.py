"""Attributed sparse voxel sets: voxelization, coarsening, feature lifting,
window partitioning and occupancy statistics.

Voxel indices are int64 triples with floor quantization (lower-inclusive),
kept unique and lexicographically sorted so that every downstream selection
is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


def lexsort_rows(indices: np.ndarray) -> np.ndarray:
    """Order that sorts integer index rows lexicographically by (x, y, z)."""
    idx = np.asarray(indices)
    if idx.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0]))


def pack_index(indices: np.ndarray, bits: int = 21) -> np.ndarray:
    """Bit-pack integer 3D indices into one int64 key per row.

    21 bits per axis with an offset shift covers +-2^20 (about +-1e6), so
    collisions are impossible across any realistic workspace.
    """
    idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    offset = np.int64(1) << (bits - 1)
    limit = np.int64(1) << bits
    shifted = idx + offset
    if shifted.size and (shifted.min() < 0 or shifted.max() >= limit):
        raise DataError("voxel index outside packable range (+-2^20)")
    return (shifted[:, 0] << (2 * bits)) | (shifted[:, 1] << bits) | shifted[:, 2]


def unpack_index(keys: np.ndarray, bits: int = 21) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64).reshape(-1)
    offset = np.int64(1) << (bits - 1)
    mask = (np.int64(1) << bits) - 1
    x = (keys >> (2 * bits)) & mask
    y = (keys >> bits) & mask
    z = keys & mask
    return np.stack([x, y, z], axis=1) - offset


@dataclass(frozen=True)
class SparseVoxelGrid:
    """Sparse set of attributed voxels at one resolution.

    indices: (N, 3) int64, unique, lexicographically sorted.
    features: (N, C) float64, C >= 1.
    """

    resolution: float
    origin: np.ndarray
    indices: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        feat = np.asarray(self.features, dtype=np.float64)
        if feat.ndim != 2:
            raise DataError(f"features must be 2D (N, C), got shape {feat.shape}")
        if self.resolution <= 0:
            raise DataError(f"voxel size must be positive, got {self.resolution}")
        if feat.shape[0] != idx.shape[0]:
            raise DataError("indices / features row count mismatch")
        if feat.shape[1] < 1:
            raise DataError("features need at least one channel")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "features", feat)

    def __len__(self) -> int:
        return self.indices.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def centers(self) -> np.ndarray:
        """World-frame voxel centers, meters."""
        return self.origin + (self.indices.astype(np.float64) + 0.5) * self.resolution

    def keys(self) -> np.ndarray:
        return pack_index(self.indices)

    def row_lookup(self, query_indices: np.ndarray) -> np.ndarray:
        """Row of each query index, or -1 when absent (vectorized search)."""
        q = np.asarray(query_indices, dtype=np.int64).reshape(-1, 3)
        if len(self) == 0 or q.shape[0] == 0:
            return np.full(q.shape[0], -1, dtype=np.int64)
        keys = self.keys()  # sorted because indices are lex-sorted
        qk = pack_index(q)
        pos = np.searchsorted(keys, qk)
        pos_clip = np.minimum(pos, len(keys) - 1)
        found = keys[pos_clip] == qk
        return np.where(found, pos_clip, -1)


def _group_sorted(keys_sorted: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Start offsets and unique keys of runs in an already-sorted key array."""
    if keys_sorted.size == 0:
        return np.zeros(0, dtype=np.int64), keys_sorted
    change = np.empty(keys_sorted.size, dtype=bool)
    change[0] = True
    change[1:] = keys_sorted[1:] != keys_sorted[:-1]
    starts = np.nonzero(change)[0]
    return starts, keys_sorted[starts]


def voxelize(points: np.ndarray, resolution: float, origin) -> SparseVoxelGrid:
    """Quantize points (N_p, 3+k) into a sparse voxel grid, k in {0, 1}.

    Per-voxel feature vector: [mean point offset from the voxel center in
    units of the voxel size (3), log(1 + point count) (1), mean of the extra
    channel when present (1)] -> C in {4, 5}.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] not in (3, 4):
        raise DataError(f"points must be (N, 3) or (N, 4), got {pts.shape}")
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    has_extra = pts.shape[1] == 4
    n_channels = 5 if has_extra else 4
    if pts.shape[0] == 0:
        return SparseVoxelGrid(resolution, origin, np.zeros((0, 3), dtype=np.int64), np.zeros((0, n_channels)))
    xyz = pts[:, :3]
    idx = np.floor((xyz - origin) / resolution).astype(np.int64)
    keys = pack_index(idx)
    order = np.argsort(keys, kind="stable")
    keys_s = keys[order]
    starts, _ = _group_sorted(keys_s)
    counts = np.diff(np.append(starts, keys_s.size))

    xyz_s = xyz[order]
    sums = np.add.reduceat(xyz_s, starts, axis=0)
    means = sums / counts[:, None]
    uniq_idx = idx[order][starts]
    centers = origin + (uniq_idx.astype(np.float64) + 0.5) * resolution
    offset_feat = (means - centers) / resolution
    count_feat = np.log1p(counts.astype(np.float64))[:, None]
    feats = [offset_feat, count_feat]
    if has_extra:
        extra_s = pts[order, 3]
        extra_mean = np.add.reduceat(extra_s, starts) / counts
        feats.append(extra_mean[:, None])
    features = np.hstack(feats)

    # reduceat groups arrive sorted by packed key == lexicographic by (x,y,z)
    return SparseVoxelGrid(resolution, origin, uniq_idx, features)


def coarsen(grid: SparseVoxelGrid, factor: int = 10) -> tuple[SparseVoxelGrid, np.ndarray]:
    """Pool a grid by an integer factor: coarse index = floor(v / factor),
    coarse feature = mean of child features.

    Returns (coarse grid, parent_row) where parent_row[i] is the coarse row
    of fine voxel i.
    """
    if int(factor) != factor or factor < 2:
        raise DataError(f"coarsening factor must be an integer >= 2, got {factor}")
    factor = int(factor)
    coarse_idx = np.floor_divide(grid.indices, factor)
    if len(grid) == 0:
        empty = SparseVoxelGrid(grid.resolution * factor, grid.origin,
                                np.zeros((0, 3), dtype=np.int64), np.zeros((0, grid.channels)))
        return empty, np.zeros(0, dtype=np.int64)
    keys = pack_index(coarse_idx)
    order = np.argsort(keys, kind="stable")
    keys_s = keys[order]
    starts, _ = _group_sorted(keys_s)
    counts = np.diff(np.append(starts, keys_s.size))
    feat_sums = np.add.reduceat(grid.features[order], starts, axis=0)
    coarse_feat = feat_sums / counts[:, None]
    uniq = coarse_idx[order][starts]
    coarse = SparseVoxelGrid(grid.resolution * factor, grid.origin, uniq, coarse_feat)
    parent_row = np.empty(len(grid), dtype=np.int64)
    parent_row[order] = np.repeat(np.arange(len(starts), dtype=np.int64), counts)
    return coarse, parent_row


def lift_and_filter(
    fine: SparseVoxelGrid,
    kept_coarse: np.ndarray,
    coarse_features: np.ndarray,
    factor: int = 10,
) -> SparseVoxelGrid:
    """Keep the fine voxels whose coarse parent survived a filter and widen
    their features with the parent's (voxel grid search + enrichment).

    kept_coarse: (M, 3) int64 coarse indices; coarse_features: (M, C') rows
    aligned with kept_coarse. Output channels = fine C + C'.
    """
    kept = np.asarray(kept_coarse, dtype=np.int64).reshape(-1, 3)
    cf = np.atleast_2d(np.asarray(coarse_features, dtype=np.float64))
    if kept.shape[0] != cf.shape[0]:
        if kept.shape[0] == 0 and cf.size == 0:
            cf = cf.reshape(0, max(1, cf.shape[-1]))
        else:
            raise DataError("kept_coarse / coarse_features row count mismatch")
    c_out = fine.channels + cf.shape[1]
    if kept.shape[0] == 0 or len(fine) == 0:
        return SparseVoxelGrid(fine.resolution, fine.origin, np.zeros((0, 3), dtype=np.int64), np.zeros((0, c_out)))
    parent_idx = np.floor_divide(fine.indices, int(factor))
    kept_keys = pack_index(kept)
    order = np.argsort(kept_keys, kind="stable")
    kept_keys_s = kept_keys[order]
    pk = pack_index(parent_idx)
    pos = np.searchsorted(kept_keys_s, pk)
    pos_clip = np.minimum(pos, len(kept_keys_s) - 1)
    hit = kept_keys_s[pos_clip] == pk
    rows = np.nonzero(hit)[0]
    match = order[pos_clip[rows]]
    features = np.hstack([fine.features[rows], cf[match]])
    return SparseVoxelGrid(fine.resolution, fine.origin, fine.indices[rows], features)


def partition_windows(grid: SparseVoxelGrid, window: int) -> list[tuple[tuple[int, int, int], np.ndarray]]:
    """Partition voxels into non-overlapping cubic windows of `window` voxels.

    Window id = floor(v / window). Returns (window id, member rows) pairs in
    lexicographic window order; member rows stay index-sorted. Every voxel
    lands in exactly one window and window populations are dynamic.
    """
    return partition_indices(grid.indices, window)


def partition_indices(indices: np.ndarray, window: int) -> list[tuple[tuple[int, int, int], np.ndarray]]:
    """partition_windows on a bare index array."""
    if int(window) != window or window < 1:
        raise DataError(f"window size must be an integer >= 1, got {window}")
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    if indices.shape[0] == 0:
        return []
    wid = np.floor_divide(indices, int(window))
    keys = pack_index(wid)
    order = np.argsort(keys, kind="stable")
    keys_s = keys[order]
    starts, uniq_keys = _group_sorted(keys_s)
    counts = np.diff(np.append(starts, keys_s.size))
    ids = unpack_index(uniq_keys)
    out = []
    for i in range(len(starts)):
        rows = order[starts[i] : starts[i] + counts[i]]
        out.append(((int(ids[i, 0]), int(ids[i, 1]), int(ids[i, 2])), np.sort(rows)))
    return out


def occupancy_stats(points: np.ndarray, workspace_extent, resolutions) -> list[dict]:
    """Sparse vs dense voxel counts of a point set over a resolution sweep.

    dense count = prod(ceil(extent / theta)); ratio = sparse / dense.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    extent = np.asarray(workspace_extent, dtype=np.float64).reshape(3)
    rows = []
    for theta in resolutions:
        if pts.shape[0]:
            idx = np.floor(pts / theta).astype(np.int64)
            sparse = len(np.unique(pack_index(idx)))
        else:
            sparse = 0
        dense = int(np.prod(np.ceil(extent / theta)))
        rows.append({
            "theta_mm": theta * 1000.0,
            "sparse": int(sparse),
            "dense": dense,
            "ratio": sparse / dense if dense else 0.0,
        })
    return rows


def occupancy_csv(rows: list[dict]) -> str:
    """CSV text for occupancy statistics (columns theta_mm,sparse,dense,ratio)."""
    lines = ["theta_mm,sparse,dense,ratio"]
    for r in rows:
        lines.append(f"{r['theta_mm']:.6g},{r['sparse']},{r['dense']},{r['ratio']:.9g}")
    return "\n".join(lines) + "\n"


def loglog_slope(x, y) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx = np.log(np.asarray(x, dtype=np.float64))
    ly = np.log(np.asarray(y, dtype=np.float64))
    lx = lx - lx.mean()
    return float(np.dot(lx, ly - ly.mean()) / np.dot(lx, lx))
