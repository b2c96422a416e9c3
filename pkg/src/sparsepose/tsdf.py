"""Hash-blocked sparse truncated signed distance field.

The workspace is tiled into coarse blocks of B = L * theta meters; only
blocks touched by the observed surface (plus their 26-neighborhood, so the
truncation band stays representable) are allocated. Each block holds an
L^3 voxel payload of (normalized signed distance, accumulated weight).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .camera import CameraExtrinsics, CameraIntrinsics, DepthImage
from .errors import DataError
from .fusion import FusedPointCloud
from .grid import pack_index, unpack_index

_NEIGHBOR_OFFSETS = np.array(
    [[dx, dy, dz] for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
    dtype=np.int64,
)


@dataclass(frozen=True)
class TsdfConfig:
    """Block/voxel geometry and integration constants.

    block size B = voxels_per_side * voxel_size holds exactly; truncation
    defaults to 8 voxel sizes.
    """

    voxel_size: float
    voxels_per_side: int = 16
    truncation: float | None = None
    weight_cap: float = 64.0

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise DataError(f"voxel size must be positive, got {self.voxel_size}")
        if self.voxels_per_side < 1:
            raise DataError("voxels_per_side must be >= 1")
        if self.truncation is None:
            object.__setattr__(self, "truncation", 8.0 * self.voxel_size)
        if self.truncation <= 0:
            raise DataError(f"truncation must be positive, got {self.truncation}")
        if self.weight_cap <= 0:
            raise DataError("weight cap must be positive")

    @property
    def block_size(self) -> float:
        return self.voxels_per_side * self.voxel_size


def activate_blocks(cloud: FusedPointCloud, cfg: TsdfConfig, origin) -> np.ndarray:
    """Blocks intersected by the surface observation, dilated by their
    26-neighborhood so the +-truncation band around the surface fits.

    Returns (n, 3) int64 block indices, lexicographically sorted. Empty
    clouds activate nothing.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    if len(cloud) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    surf = np.floor((cloud.points - origin) / cfg.block_size).astype(np.int64)
    surf = np.unique(pack_index(surf))
    dilated = unpack_index(surf)[:, None, :] + _NEIGHBOR_OFFSETS[None, :, :]
    keys = np.unique(pack_index(dilated.reshape(-1, 3)))
    return unpack_index(np.sort(keys))


class SparseTsdf:
    """Hash map from block index to an L^3 payload of (sdf, weight) voxels.

    sdf is the normalized truncated signed distance in [-1, 1]; weight counts
    capped observations. Blocks are fixed at construction (activation step);
    their payloads are independent array slices, so concurrent reads with
    exclusive per-block writes are safe.
    """

    def __init__(self, cfg: TsdfConfig, block_indices: np.ndarray, origin):
        self.cfg = cfg
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        blocks = np.asarray(block_indices, dtype=np.int64).reshape(-1, 3)
        keys = pack_index(blocks)
        order = np.argsort(keys)
        self.block_indices = blocks[order]
        self._block_map: dict[int, int] = {int(k): i for i, k in enumerate(keys[order])}
        L = cfg.voxels_per_side
        n = len(self.block_indices)
        self.sdf = np.zeros((n, L, L, L), dtype=np.float64)
        self.weight = np.zeros((n, L, L, L), dtype=np.float64)
        # Per-voxel world centers, flattened once; integration reuses them.
        ll = np.arange(L)
        lx, ly, lz = np.meshgrid(ll, ll, ll, indexing="ij")
        self._local = np.stack([lx, ly, lz], axis=-1).reshape(-1, 3)  # (L^3, 3)

    @property
    def n_blocks(self) -> int:
        return len(self.block_indices)

    def block_slot(self, block_index) -> int | None:
        key = int(pack_index(np.asarray(block_index).reshape(1, 3))[0])
        return self._block_map.get(key)

    def voxel_centers(self) -> np.ndarray:
        """(n_blocks * L^3, 3) world centers, block-major then local lex order."""
        L = self.cfg.voxels_per_side
        base = self.block_indices.astype(np.float64) * self.cfg.block_size
        local = (self._local.astype(np.float64) + 0.5) * self.cfg.voxel_size
        return (self.origin + base[:, None, :] + local[None, :, :]).reshape(-1, 3)

    def integrate_view(
        self,
        depth: DepthImage,
        intr: CameraIntrinsics,
        extr: CameraExtrinsics,
        near: float = 0.0,
        far: float = np.inf,
    ) -> None:
        """Fuse one depth view into every active voxel (weighted average).

        For each voxel center v: project into the view, read d at the nearest
        pixel, form s = d - z and the normalized value clamp(s / tau, -1, 1).
        Updates are skipped for invalid pixels, points behind the camera and
        s < -tau (deep behind the surface, standard space carving guard).
        """
        if self.n_blocks == 0:
            return
        centers = self.voxel_centers()
        cam_pts = (centers - extr.translation) @ extr.rotation
        z = cam_pts[:, 2]
        ok = z > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.round(intr.fx * cam_pts[:, 0] / z + intr.cx).astype(np.int64)
            v = np.round(intr.fy * cam_pts[:, 1] / z + intr.cy).astype(np.int64)
        ok &= (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
        d = np.zeros_like(z)
        d[ok] = depth.values[v[ok], u[ok]]
        ok &= (d > 0) & (d >= near) & (d <= far)
        s = d - z
        ok &= s >= -self.cfg.truncation
        phi = np.clip(s / self.cfg.truncation, -1.0, 1.0)

        flat_sdf = self.sdf.reshape(-1)
        flat_w = self.weight.reshape(-1)
        w_old = flat_w[ok]
        flat_sdf[ok] = (w_old * flat_sdf[ok] + phi[ok]) / (w_old + 1.0)
        flat_w[ok] = np.minimum(w_old + 1.0, self.cfg.weight_cap)

    def extract_pbar(self) -> np.ndarray:
        """Enriched representation: rows (x, y, z, sdf) for every observed
        voxel strictly inside the truncation band (w > 0 and |sdf| < 1).

        Row order is deterministic: block lex order, then local voxel lex
        order within the block.
        """
        if self.n_blocks == 0:
            return np.zeros((0, 4))
        flat_sdf = self.sdf.reshape(self.n_blocks, -1)
        flat_w = self.weight.reshape(self.n_blocks, -1)
        keep = (flat_w > 0) & (np.abs(flat_sdf) < 1.0)
        if not keep.any():
            return np.zeros((0, 4))
        centers = self.voxel_centers().reshape(self.n_blocks, -1, 3)
        return np.hstack([centers[keep], flat_sdf[keep][:, None]])

    def global_voxel_indices(self) -> np.ndarray:
        """(n_blocks * L^3, 3) global voxel indices at resolution voxel_size."""
        L = self.cfg.voxels_per_side
        base = self.block_indices * L
        return (base[:, None, :] + self._local[None, :, :]).reshape(-1, 3)

    # -- binary dump ---------------------------------------------------------
    # Layout (little-endian):
    #   magic "SPTSDF01" (8 bytes)
    #   float64 block_size, int32 voxels_per_side, float64 voxel_size,
    #   float64 truncation, float64 weight_cap, float64 origin[3],
    #   int64 block_count
    #   per block: int64 index[3], then L^3 pairs of float32 (sdf, weight)
    #   in local lexicographic voxel order.

    MAGIC = b"SPTSDF01"

    def dump(self, path) -> None:
        L = self.cfg.voxels_per_side
        with open(path, "wb") as f:
            f.write(self.MAGIC)
            f.write(struct.pack("<dIdddddd", self.cfg.block_size, L, self.cfg.voxel_size,
                                self.cfg.truncation, self.cfg.weight_cap, *self.origin))
            f.write(struct.pack("<q", self.n_blocks))
            for i in range(self.n_blocks):
                f.write(struct.pack("<3q", *self.block_indices[i]))
                pairs = np.empty((L * L * L, 2), dtype="<f4")
                pairs[:, 0] = self.sdf[i].reshape(-1)
                pairs[:, 1] = self.weight[i].reshape(-1)
                f.write(pairs.tobytes())

    @classmethod
    def load(cls, path) -> "SparseTsdf":
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:8] != cls.MAGIC:
            raise DataError(f"{path}: not a sparse TSDF dump")
        header = struct.Struct("<dIdddddd")
        block_size, L, voxel_size, trunc, cap, ox, oy, oz = header.unpack_from(blob, 8)
        pos = 8 + header.size
        (n_blocks,) = struct.unpack_from("<q", blob, pos)
        pos += 8
        cfg = TsdfConfig(voxel_size=voxel_size, voxels_per_side=L, truncation=trunc, weight_cap=cap)
        if abs(cfg.block_size - block_size) > 1e-12:
            raise DataError(f"{path}: inconsistent block size in header")
        indices = np.zeros((n_blocks, 3), dtype=np.int64)
        payload_len = L * L * L * 8
        payloads = []
        for i in range(n_blocks):
            indices[i] = struct.unpack_from("<3q", blob, pos)
            pos += 24
            pairs = np.frombuffer(blob[pos : pos + payload_len], dtype="<f4").reshape(-1, 2)
            pos += payload_len
            payloads.append(pairs)
        out = cls(cfg, indices, (ox, oy, oz))
        for i, pairs in enumerate(payloads):
            slot = out.block_slot(indices[i])
            out.sdf[slot] = pairs[:, 0].astype(np.float64).reshape(L, L, L)
            out.weight[slot] = pairs[:, 1].astype(np.float64).reshape(L, L, L)
        return out


def build_tsdf(
    cloud: FusedPointCloud,
    depths,
    cams,
    cfg: TsdfConfig,
    origin,
    near: float = 0.0,
    far: float = np.inf,
) -> SparseTsdf:
    """Activate blocks from the fused cloud, then integrate every view."""
    blocks = activate_blocks(cloud, cfg, origin)
    tsdf = SparseTsdf(cfg, blocks, origin)
    for depth, (intr, extr) in zip(depths, cams):
        tsdf.integrate_view(depth, intr, extr, near=near, far=far)
    return tsdf


def dense_tsdf_reference(
    depths,
    cams,
    cfg: TsdfConfig,
    origin,
    dims,
    near: float = 0.0,
    far: float = np.inf,
) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force dense TSDF over a full dims[0] x dims[1] x dims[2] grid.

    Same per-voxel update rule as the sparse structure, looped over every
    voxel of the workspace; serves as the equivalence oracle for small grids.
    Returns (sdf, weight) arrays of shape dims.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    dims = tuple(int(d) for d in dims)
    gx, gy, gz = np.meshgrid(np.arange(dims[0]), np.arange(dims[1]), np.arange(dims[2]), indexing="ij")
    centers = origin + (np.stack([gx, gy, gz], axis=-1).reshape(-1, 3) + 0.5) * cfg.voxel_size
    sdf = np.zeros(len(centers))
    weight = np.zeros(len(centers))
    for depth, (intr, extr) in zip(depths, cams):
        cam_pts = (centers - extr.translation) @ extr.rotation
        z = cam_pts[:, 2]
        ok = z > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.round(intr.fx * cam_pts[:, 0] / z + intr.cx).astype(np.int64)
            v = np.round(intr.fy * cam_pts[:, 1] / z + intr.cy).astype(np.int64)
        ok &= (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
        d = np.zeros_like(z)
        d[ok] = depth.values[v[ok], u[ok]]
        ok &= (d > 0) & (d >= near) & (d <= far)
        s = d - z
        ok &= s >= -cfg.truncation
        phi = np.clip(s / cfg.truncation, -1.0, 1.0)
        w_old = weight[ok]
        sdf[ok] = (w_old * sdf[ok] + phi[ok]) / (w_old + 1.0)
        weight[ok] = np.minimum(w_old + 1.0, cfg.weight_cap)
    return sdf.reshape(dims), weight.reshape(dims)
