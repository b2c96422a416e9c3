"""Multi-view depth fusion into a single world-frame point cloud.

The vanilla input path: per-view back-projection, workspace cropping, plain
union (no deduplication; that happens implicitly at voxelization).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .camera import DEFAULT_FAR, DEFAULT_NEAR, CameraExtrinsics, CameraIntrinsics, DepthImage, backproject
from .errors import DataError


@dataclass(frozen=True)
class Workspace:
    """Axis-aligned observation volume, meters. Inclusive min, exclusive max."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)
        if not np.all(hi > lo):
            raise DataError(f"workspace max {hi} must exceed min {lo} on every axis")

    @property
    def extent(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.all((p >= self.min_corner) & (p < self.max_corner), axis=1)


@dataclass(frozen=True)
class FusedPointCloud:
    """World-frame points with their source view index; may be empty."""

    points: np.ndarray      # (N, 3) float64, meters
    source_view: np.ndarray  # (N,) int32

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        s = np.asarray(self.source_view, dtype=np.int32).reshape(-1)
        if p.shape[0] != s.shape[0]:
            raise DataError("points / source_view row count mismatch")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "source_view", s)

    def __len__(self) -> int:
        return self.points.shape[0]

    @staticmethod
    def empty() -> "FusedPointCloud":
        return FusedPointCloud(np.zeros((0, 3)), np.zeros(0, dtype=np.int32))


def fuse_views(
    depths: list[DepthImage],
    cams: list[tuple[CameraIntrinsics, CameraExtrinsics]],
    workspace: Workspace,
    near: float = DEFAULT_NEAR,
    far: float = DEFAULT_FAR,
) -> FusedPointCloud:
    """Back-project every view and concatenate, cropped to the workspace.

    Point order is deterministic: view-major, then row-major within a view.
    No valid points is a legitimate outcome and yields an empty cloud.
    """
    if len(depths) != len(cams) or len(depths) < 1:
        raise DataError(f"need equally many depths and cameras (>= 1), got {len(depths)} / {len(cams)}")
    chunks = []
    views = []
    for i, (depth, (intr, extr)) in enumerate(zip(depths, cams)):
        pts = backproject(depth, intr, extr, near=near, far=far)
        pts = pts[workspace.contains(pts)]
        chunks.append(pts)
        views.append(np.full(len(pts), i, dtype=np.int32))
    if not chunks:
        return FusedPointCloud.empty()
    return FusedPointCloud(np.concatenate(chunks, axis=0), np.concatenate(views))


# ---------------------------------------------------------------------------
# PLY (binary little-endian) for cloud inspection and model meshes
# ---------------------------------------------------------------------------


def write_ply_points(path, points: np.ndarray, scalar: np.ndarray | None = None, scalar_name: str = "value") -> None:
    """Binary little-endian PLY of a point cloud, optional per-point scalar."""
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(pts)}"]
    header += ["property float x", "property float y", "property float z"]
    if scalar is not None:
        header.append(f"property float {scalar_name}")
    header += ["end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if scalar is None:
            f.write(pts.tobytes())
        else:
            s = np.asarray(scalar, dtype="<f4").reshape(-1, 1)
            if len(s) != len(pts):
                raise DataError("scalar length must match point count")
            f.write(np.hstack([pts, s]).tobytes())


def write_ply_mesh(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    """Binary little-endian PLY triangle mesh."""
    verts = np.asarray(vertices, dtype="<f4").reshape(-1, 3)
    tris = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {len(verts)}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {len(tris)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(verts.tobytes())
        for tri in tris:
            f.write(struct.pack("<B3i", 3, int(tri[0]), int(tri[1]), int(tri[2])))


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None, list[str]]:
    """Read a binary little-endian PLY written by this module.

    Returns (vertex table (N, P) float64, faces (F, 3) int64 or None,
    vertex property names).
    """
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise DataError(f"{path}: not a PLY file")
    header_lines = blob[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header_lines:
        raise DataError(f"{path}: only binary little-endian PLY supported")
    n_vert = n_face = 0
    props: list[str] = []
    element = None
    for line in header_lines:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "element":
            element = parts[1]
            if element == "vertex":
                n_vert = int(parts[2])
            elif element == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and element == "vertex":
            if parts[1] != "float":
                raise DataError(f"{path}: unsupported vertex property type {parts[1]}")
            props.append(parts[2])
    body = blob[end + len(b"end_header\n"):]
    n_props = len(props)
    vert_bytes = n_vert * n_props * 4
    verts = np.frombuffer(body[:vert_bytes], dtype="<f4").reshape(n_vert, n_props).astype(np.float64)
    faces = None
    if n_face:
        faces = np.zeros((n_face, 3), dtype=np.int64)
        pos = vert_bytes
        for i in range(n_face):
            count = body[pos]
            if count != 3:
                raise DataError(f"{path}: only triangle faces supported")
            faces[i] = struct.unpack_from("<3i", body, pos + 1)
            pos += 13
    return verts, faces, props
