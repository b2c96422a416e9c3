"""Per-voxel voting 6D pose recovery.

Foreground voxels vote with a translation offset to their object's center
and a 6D rotation; votes cluster with DBSCAN in predicted-center space, each
cluster's most confident votes are averaged (chordal mean for rotations) and
a final point-to-point ICP against the scene cloud polishes every pose.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, NumericalError
from .grid import SparseVoxelGrid
from .heatmap import SceneGroundTruth, voxel_object_assignment
from .ioutil import atomic_write_text


@dataclass(frozen=True)
class VoteSet:
    """Per-voxel pose votes: centers, translation offsets (meters), rotations
    in the 6D encoding, confidences and class ids."""

    voxel_centers: np.ndarray  # (K, 3)
    offsets: np.ndarray        # (K, 3)
    rot6d: np.ndarray          # (K, 6)
    confidence: np.ndarray     # (K,)
    class_ids: np.ndarray      # (K,)

    def __post_init__(self):
        c = np.asarray(self.voxel_centers, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        r = np.asarray(self.rot6d, dtype=np.float64).reshape(-1, 6)
        conf = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        cls = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        n = c.shape[0]
        if not (t.shape[0] == r.shape[0] == conf.shape[0] == cls.shape[0] == n):
            raise DataError("vote arrays must have consistent row counts")
        if not np.all(np.isfinite(t)):
            raise DataError("vote offsets must be finite")
        for name, arr in (("voxel_centers", c), ("offsets", t), ("rot6d", r),
                          ("confidence", conf), ("class_ids", cls)):
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.voxel_centers.shape[0]

    def predicted_centers(self) -> np.ndarray:
        return self.voxel_centers + self.offsets


@dataclass
class Pose:
    """One estimated rigid transform with bookkeeping."""

    rotation: np.ndarray    # (3, 3), orthonormal det +1
    translation: np.ndarray  # (3,), meters
    class_id: int
    confidence: float = 1.0
    support: int = 1
    refined: bool = False

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise DataError("pose rotation must be orthonormal with det +1")
        self.rotation = R
        self.translation = t


PoseSet = list


def pose_targets(grid: SparseVoxelGrid, gt: SceneGroundTruth):
    """Per-voxel supervision: offset to the owning object's centroid, the
    object rotation, and a validity mask (background voxels are masked out
    of both losses). Returns (t (K,3), R (K,3,3), valid (K,), owner (K,))."""
    owner = voxel_object_assignment(grid, gt)
    k = len(grid)
    t = np.zeros((k, 3))
    R = np.tile(np.eye(3), (k, 1, 1))
    valid = owner >= 0
    if valid.any():
        centers = grid.centers()
        t[valid] = gt.centroids[owner[valid]] - centers[valid]
    return t, R, valid, owner


def attach_rotations(R_all: np.ndarray, owner: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Fill per-voxel rotation targets from per-object rotations."""
    out = R_all.copy()
    valid = owner >= 0
    out[valid] = rotations[owner[valid]]
    return out


def smooth_l1(pred: np.ndarray, target: np.ndarray, mask: np.ndarray, delta: float = 0.01):
    """Huber loss on per-coordinate errors, summed over coordinates, mean
    over valid voxels. Returns (loss, dloss/dpred)."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    m = np.asarray(mask, dtype=bool).reshape(-1)
    if p.shape != t.shape or p.shape[0] != m.shape[0]:
        raise DataError("smooth_l1 shape mismatch")
    n_valid = max(1, int(m.sum()))
    e = p - t
    abs_e = np.abs(e)
    quad = abs_e < delta
    per = np.where(quad, 0.5 * e**2 / delta, abs_e - 0.5 * delta)
    loss = float(per[m].sum() / n_valid)
    grad = np.where(quad, e / delta, np.sign(e)) / n_valid
    grad[~m] = 0.0
    return loss, grad


# ---------------------------------------------------------------------------
# 6D rotation representation
# ---------------------------------------------------------------------------


def rot6d_to_matrix(r6: np.ndarray) -> np.ndarray:
    """Gram-Schmidt map from the 6D encoding to SO(3).

    b1 = normalize(a1), b2 = normalize(a2 - (b1.a2) b1), b3 = b1 x b2;
    columns (b1, b2, b3). Degenerate inputs (zero or parallel halves) raise.
    """
    r = np.asarray(r6, dtype=np.float64)
    single = r.ndim == 1
    r = np.atleast_2d(r)
    if r.shape[1] != 6:
        raise DataError(f"6D rotation encoding must have 6 components, got {r.shape}")
    a1, a2 = r[:, :3], r[:, 3:]
    n1 = np.linalg.norm(a1, axis=1)
    if np.any(n1 < 1e-9):
        raise NumericalError("degenerate 6D rotation: first triple has near-zero norm")
    b1 = a1 / n1[:, None]
    proj = np.sum(b1 * a2, axis=1, keepdims=True)
    u2 = a2 - proj * b1
    n2 = np.linalg.norm(u2, axis=1)
    if np.any(n2 < 1e-9):
        raise NumericalError("degenerate 6D rotation: triples are (near-)parallel")
    b2 = u2 / n2[:, None]
    b3 = np.cross(b1, b2)
    R = np.stack([b1, b2, b3], axis=2)
    return R[0] if single else R


def matrix_to_rot6d(R: np.ndarray) -> np.ndarray:
    """Inverse encoding: the first two columns of the rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    single = R.ndim == 2
    R = R.reshape(-1, 3, 3)
    out = np.concatenate([R[:, :, 0], R[:, :, 1]], axis=1)
    return out[0] if single else out


def _rows3(t: Tensor, start: int) -> Tensor:
    return ad.narrow(t, 1, start, 3)


def rot6d_to_matrix_graph(r6: Tensor) -> Tensor:
    """Differentiable Gram-Schmidt: (K, 6) -> (K, 3, 3), columns (b1, b2, b3)."""
    a1 = _rows3(r6, 0)
    a2 = _rows3(r6, 3)
    n1 = ad.pow_const(ad.tsum(ad.mul(a1, a1), axis=1, keepdims=True), 0.5)
    b1 = ad.div(a1, n1)
    proj = ad.tsum(ad.mul(b1, a2), axis=1, keepdims=True)
    u2 = ad.sub(a2, ad.mul(proj, b1))
    n2 = ad.pow_const(ad.tsum(ad.mul(u2, u2), axis=1, keepdims=True), 0.5)
    b2 = ad.div(u2, n2)
    # cross product via coordinate slices
    x1, y1, z1 = (ad.narrow(b1, 1, i, 1) for i in range(3))
    x2, y2, z2 = (ad.narrow(b2, 1, i, 1) for i in range(3))
    b3 = ad.concat(
        [
            ad.sub(ad.mul(y1, z2), ad.mul(z1, y2)),
            ad.sub(ad.mul(z1, x2), ad.mul(x1, z2)),
            ad.sub(ad.mul(x1, y2), ad.mul(y1, x2)),
        ],
        axis=1,
    )
    cols = ad.concat(
        [ad.reshape(b, (-1, 3, 1)) for b in (b1, b2, b3)],
        axis=2,
    )
    return cols


def subsample_rows(points: np.ndarray, n: int) -> np.ndarray:
    """Deterministic subsample: evenly spaced rows of the canonical order."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) <= n:
        return pts
    sel = np.floor(np.linspace(0, len(pts) - 1, n)).astype(np.int64)
    return pts[sel]


def chamfer_rot_loss_graph(r6: Tensor, R_gt: np.ndarray, model_points: np.ndarray,
                           mask: np.ndarray, n_pts: int = 256) -> Tensor:
    """Symmetric squared chamfer distance between the predicted and ground
    truth placements of the (translation-free) model cloud, mean over valid
    voxels. Differentiable w.r.t. the 6D rotation encodings."""
    m = np.asarray(mask, dtype=bool).reshape(-1)
    pts = subsample_rows(model_points, n_pts)
    if pts.shape[0] == 0:
        raise DataError("chamfer loss needs a nonempty model cloud")
    if not m.any():
        return ad.constant(0.0)
    rows = np.nonzero(m)[0]
    r_sel = ad.gather_rows(r6, rows)
    R_pred = rot6d_to_matrix_graph(r_sel)                       # (V, 3, 3)
    A = ad.matmul(ad.constant(pts[None, :, :]), ad.transpose(R_pred, (0, 2, 1)))
    B = np.einsum("vij,nj->vni", np.asarray(R_gt)[m], pts)      # (V, n, 3) constant
    # pairwise squared distances via |a|^2 + |b|^2 - 2 a.b
    a_sq = ad.tsum(ad.mul(A, A), axis=2, keepdims=True)          # (V, n, 1)
    b_sq = np.sum(B * B, axis=2)[:, None, :]                      # (V, 1, n)
    cross = ad.matmul(A, ad.constant(np.swapaxes(B, 1, 2)))      # (V, n, n)
    d2 = ad.add(ad.sub(a_sq, ad.mul(cross, ad.constant(2.0))), ad.constant(b_sq))
    fwd = ad.tmean(ad.reduce_min(d2, axis=2), axis=1)             # A -> B
    bwd = ad.tmean(ad.reduce_min(d2, axis=1), axis=1)             # B -> A
    per_voxel = ad.add(fwd, bwd)
    return ad.tmean(per_voxel)


def chamfer_rot_loss(r6: np.ndarray, R_gt: np.ndarray, model_points: np.ndarray,
                     mask: np.ndarray, n_pts: int = 256):
    """Numpy-facing wrapper: returns (loss, dloss/dr6)."""
    t = Tensor(np.array(r6, dtype=np.float64), requires_grad=True)
    out = chamfer_rot_loss_graph(t, R_gt, model_points, mask, n_pts=n_pts)
    out.backward()
    grad = t.grad if t.grad is not None else np.zeros_like(t.data)
    return float(out.data), grad


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Plain symmetric squared chamfer between two point sets (KD-tree)."""
    ta, tb = cKDTree(a), cKDTree(b)
    d_ab = tb.query(a)[0]
    d_ba = ta.query(b)[0]
    return float(np.mean(d_ab**2) + np.mean(d_ba**2))


# ---------------------------------------------------------------------------
# DBSCAN
# ---------------------------------------------------------------------------

NOISE = -1


class _UnionFind:
    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)

    def find(self, i: int) -> int:
        p = self.parent
        root = i
        while p[root] != root:
            root = p[root]
        while p[i] != root:  # path compression
            p[i], i = root, p[i]
        return root

    def union(self, i: int, j: int):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density-based clustering; labels are cluster ids (0..) or -1 (noise).

    Semantics match the textbook algorithm: neighborhoods use distance <=
    eps and include the point itself; core points need min_pts neighbors;
    clusters are the connected components of core points, numbered by their
    smallest core row; border points join the lowest-numbered cluster with a
    core point in range. Deterministic given the canonical point ordering.

    Internally clusters are built cell-wise (cell edge = eps) so heaps of
    near-duplicate points (vote blobs) stay cheap.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if eps <= 0 or min_pts < 1:
        raise DataError("dbscan needs eps > 0 and min_pts >= 1")
    n = len(pts)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(pts)
    counts = tree.query_ball_point(pts, eps, return_length=True)
    core = counts >= min_pts
    core_rows = np.nonzero(core)[0]
    if core_rows.size == 0:
        return labels

    cpts = pts[core_rows]
    cells = np.floor(cpts / eps).astype(np.int64)
    order = np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0]))
    cells_s = cells[order]
    starts = np.nonzero(np.r_[True, np.any(cells_s[1:] != cells_s[:-1], axis=1)])[0]
    ends = np.r_[starts[1:], len(cells_s)]
    cell_of = {tuple(cells_s[s]): k for k, s in enumerate(starts)}
    members = [order[s:e] for s, e in zip(starts, ends)]

    uf = _UnionFind(len(cpts))
    eps_sq = eps * eps

    def link_groups(a: np.ndarray, b: np.ndarray, same: bool):
        pa, pb = cpts[a], cpts[b]
        lo = np.maximum(pa.min(axis=0), pb.min(axis=0)) - np.minimum(pa.max(axis=0), pb.max(axis=0))
        gap = np.maximum(lo, 0.0)
        if np.dot(gap, gap) > eps_sq:
            return
        span = np.maximum(pa.max(axis=0), pb.max(axis=0)) - np.minimum(pa.min(axis=0), pb.min(axis=0))
        if np.dot(span, span) <= eps_sq:
            # every cross (and intra) pair is within eps
            anchor = int(min(a[0], b[0]))
            for row in a:
                uf.union(anchor, int(row))
            for row in b:
                uf.union(anchor, int(row))
            return
        d2 = np.sum((pa[:, None, :] - pb[None, :, :]) ** 2, axis=2)
        ii, jj = np.nonzero(d2 <= eps_sq)
        if same:
            keep = ii < jj
            ii, jj = ii[keep], jj[keep]
        for i, j in zip(ii, jj):
            uf.union(int(a[i]), int(b[j]))

    offsets = [np.array(o) for o in np.ndindex(3, 3, 3)]
    for k, s in enumerate(starts):
        base = cells_s[s]
        rows = members[k]
        for off in offsets:
            key = tuple(base + off - 1)
            other = cell_of.get(key)
            if other is None or other < k:
                continue
            if other == k:
                if len(rows) > 1:
                    link_groups(rows, rows, same=True)
            else:
                link_groups(rows, members[other], same=False)

    roots = np.array([uf.find(i) for i in range(len(cpts))])
    # number clusters by their smallest core row index
    uniq_roots = np.unique(roots)
    min_row = np.full(len(uniq_roots), np.iinfo(np.int64).max)
    root_slot = {int(r): k for k, r in enumerate(uniq_roots)}
    for i, r in enumerate(roots):
        slot = root_slot[int(r)]
        min_row[slot] = min(min_row[slot], core_rows[i])
    cluster_order = np.argsort(min_row)
    cluster_id = np.empty(len(uniq_roots), dtype=np.int64)
    cluster_id[cluster_order] = np.arange(len(uniq_roots))
    labels[core_rows] = cluster_id[np.array([root_slot[int(r)] for r in roots])]

    border_rows = np.nonzero(~core & (counts > 1))[0]
    if border_rows.size:
        core_tree = cKDTree(cpts)
        near = core_tree.query_ball_point(pts[border_rows], eps)
        core_labels = labels[core_rows]
        for row, neighbors in zip(border_rows, near):
            if neighbors:
                labels[row] = core_labels[np.asarray(neighbors)].min()
    return labels


# ---------------------------------------------------------------------------
# Vote aggregation
# ---------------------------------------------------------------------------


def chordal_mean(rotations: np.ndarray) -> np.ndarray:
    """SO(3) projection of the arithmetic rotation mean (polar projection
    with determinant correction); minimizes summed Frobenius distance."""
    R = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    if len(R) == 0:
        raise DataError("chordal mean of an empty rotation set")
    M = R.mean(axis=0)
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    if d == 0:
        raise NumericalError("degenerate rotation mean")
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def aggregate_votes(votes: VoteSet, labels: np.ndarray, top_fraction: float = 0.5) -> PoseSet:
    """Collapse each cluster into one pose from its most confident votes.

    Per cluster: keep the top `top_fraction` votes by confidence (at least
    one), average predicted centers for the translation, chordal-mean the
    rotations, pick the class by confidence-weighted majority. Noise votes
    are ignored. Clusters are processed in ascending label order.
    """
    if not (0.0 < top_fraction <= 1.0):
        raise DataError("top_fraction must lie in (0, 1]")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != len(votes):
        raise DataError("labels must align with votes")
    poses: PoseSet = []
    centers = votes.predicted_centers()
    for cluster in np.unique(labels[labels >= 0]):
        rows = np.nonzero(labels == cluster)[0]
        order = rows[np.argsort(-votes.confidence[rows], kind="stable")]
        keep = order[: max(1, int(np.ceil(top_fraction * len(order))))]
        if keep.size == 0:
            continue
        t = centers[keep].mean(axis=0)
        R = chordal_mean(rot6d_to_matrix(votes.rot6d[keep]))
        cls_ids = votes.class_ids[keep]
        conf = votes.confidence[keep]
        classes = np.unique(cls_ids)
        weights = np.array([conf[cls_ids == c].sum() for c in classes])
        class_id = int(classes[np.argmax(weights)])
        poses.append(
            Pose(
                rotation=R,
                translation=t,
                class_id=class_id,
                confidence=float(conf.mean()),
                support=int(len(rows)),
            )
        )
    return poses


# ---------------------------------------------------------------------------
# Batched ICP refinement
# ---------------------------------------------------------------------------


def _kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rigid transform aligning src onto dst."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, mu_d - R @ mu_s


def icp_refine(
    pose: Pose,
    model_points: np.ndarray,
    scene_tree: cKDTree,
    iters: int = 30,
    corr_dist: float = 0.01,
    tol: float = 1e-5,
    n_model: int = 512,
    trim: float = 1.0,
    reciprocal: bool = True,
) -> tuple[Pose, list[float]]:
    """Point-to-point ICP of one object against the scene cloud.

    Alternates nearest-neighbor correspondences and a Kabsch update; stops at
    the iteration cap or when the relative RMSE change drops below tol.

    Correspondence rejection: matches beyond corr_dist are dropped, and by
    default a reciprocal check keeps a match only when the scene point's
    nearest model point is the matcher. Partial views leave many model points
    (hidden faces, inner walls) without a true counterpart; their one-sided
    matches otherwise drag an already-correct pose sideways. An optional
    `trim` additionally keeps only the closest fraction.

    Fewer than 3 correspondences leaves the pose unrefined (refined=False).
    Returns the pose and the per-iteration RMSE trace over the kept set.
    """
    if not (0.0 < trim <= 1.0):
        raise DataError("icp trim fraction must lie in (0, 1]")
    pts = subsample_rows(model_points, n_model)
    R, t = pose.rotation.copy(), pose.translation.copy()
    trace: list[float] = []
    refined = False
    for _ in range(iters):
        moved = pts @ R.T + t
        dist, idx = scene_tree.query(moved, distance_upper_bound=corr_dist)
        ok = np.nonzero(np.isfinite(dist))[0]
        if reciprocal and ok.size:
            back = cKDTree(moved).query(scene_tree.data[idx[ok]])[1]
            ok = ok[back == ok]
        if trim < 1.0 and ok.size:
            keep = max(3, int(np.ceil(trim * ok.size)))
            order = np.argsort(dist[ok], kind="stable")
            ok = ok[np.sort(order[:keep])]
        if ok.size < 3:
            break
        src = moved[ok]
        dst = scene_tree.data[idx[ok]]
        rmse = float(np.sqrt(np.mean(np.sum((src - dst) ** 2, axis=1))))
        if trace and abs(trace[-1] - rmse) <= tol * max(trace[-1], 1e-12):
            trace.append(rmse)
            refined = True
            break
        trace.append(rmse)
        dR, dt = _kabsch(src, dst)
        R = dR @ R
        t = dR @ t + dt
        refined = True
    return (
        Pose(rotation=R, translation=t, class_id=pose.class_id,
             confidence=pose.confidence, support=pose.support, refined=refined),
        trace,
    )


def batched_icp(
    poses: PoseSet,
    models: dict,
    scene_points: np.ndarray,
    iters: int = 30,
    corr_dist: float = 0.01,
    tol: float = 1e-5,
    trim: float = 1.0,
    reciprocal: bool = True,
) -> PoseSet:
    """Refine every pose against the same scene cloud, each with independent
    correspondences. `models` maps class id -> canonical model points."""
    scene = np.asarray(scene_points, dtype=np.float64).reshape(-1, 3)
    if len(scene) == 0:
        return [Pose(p.rotation, p.translation, p.class_id, p.confidence, p.support, False) for p in poses]
    tree = cKDTree(scene)
    out: PoseSet = []
    for pose in poses:
        if pose.class_id not in models:
            raise DataError(f"no canonical model for class {pose.class_id}")
        refined, _ = icp_refine(pose, models[pose.class_id], tree,
                                iters=iters, corr_dist=corr_dist, tol=tol,
                                trim=trim, reciprocal=reciprocal)
        out.append(refined)
    return out


# ---------------------------------------------------------------------------
# Pose table I/O
# ---------------------------------------------------------------------------

POSE_CSV_COLUMNS = (
    "object_id,class_id,confidence,"
    "r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz,refined"
)


def write_pose_csv(path, poses: PoseSet, seed: int | None = None) -> None:
    buf = io.StringIO()
    if seed is not None:
        buf.write(f"# seed={seed}\n")
    buf.write(POSE_CSV_COLUMNS + "\n")
    writer = csv.writer(buf)
    for i, p in enumerate(poses):
        row = [i, p.class_id, f"{p.confidence:.9g}"]
        row += [f"{x:.17g}" for x in p.rotation.reshape(-1)]
        row += [f"{x:.17g}" for x in p.translation]
        row += [int(p.refined)]
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())


def write_pose_json(path, poses: PoseSet, seed: int | None = None) -> None:
    doc = {
        "seed": seed,
        "poses": [
            {
                "object_id": i,
                "class_id": int(p.class_id),
                "confidence": float(p.confidence),
                "rotation": [float(x) for x in p.rotation.reshape(-1)],
                "translation": [float(x) for x in p.translation],
                "support": int(p.support),
                "refined": bool(p.refined),
            }
            for i, p in enumerate(poses)
        ],
    }
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_pose_json(path) -> PoseSet:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read pose JSON ({exc})") from exc
    poses = []
    for entry in doc.get("poses", []):
        poses.append(
            Pose(
                rotation=np.asarray(entry["rotation"], dtype=np.float64).reshape(3, 3),
                translation=np.asarray(entry["translation"], dtype=np.float64),
                class_id=int(entry["class_id"]),
                confidence=float(entry.get("confidence", 1.0)),
                support=int(entry.get("support", 1)),
                refined=bool(entry.get("refined", False)),
            )
        )
    return poses
