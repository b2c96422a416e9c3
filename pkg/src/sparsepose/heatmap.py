"""Targets, losses and selection mechanics for the two heatmap stages.

Stage one scores coarse voxels against object centers and boundaries with a
Gaussian distance weighting, trains with a Gaussian focal loss and prunes
background through a sigmoid soft-attention gate. Stage two scores fine
voxels with a binary objectness target, focal loss and an adaptive topK
cut, then classifies per voxel with a conditioned, weighted cross entropy.

All loss functions return (scalar, gradient w.r.t. the prediction) so they
can be checked against finite differences and plugged into the autodiff
graph as custom nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError
from .grid import SparseVoxelGrid, lexsort_rows, pack_index

_CLAMP = 1e-6


@dataclass(frozen=True)
class SceneGroundTruth:
    """Ground truth for one scene: object centroids, world-frame model
    clouds and class ids (0 is reserved for background)."""

    centroids: np.ndarray                 # (m, 3) meters
    object_clouds: list[np.ndarray]       # m clouds, world frame
    class_ids: np.ndarray                 # (m,) int, >= 1

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64).reshape(-1, 3)
        ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        clouds = [np.asarray(o, dtype=np.float64).reshape(-1, 3) for o in self.object_clouds]
        if not (len(clouds) == c.shape[0] == ids.shape[0]):
            raise DataError("centroids / clouds / class ids count mismatch")
        for o in clouds:
            if o.shape[0] == 0:
                raise DataError("object clouds must be nonempty")
        if ids.size and ids.min() < 1:
            raise DataError("object class ids must be >= 1 (0 is background)")
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "object_clouds", clouds)
        object.__setattr__(self, "class_ids", ids)

    @property
    def n_objects(self) -> int:
        return self.centroids.shape[0]

    def all_points(self) -> np.ndarray:
        if not self.object_clouds:
            return np.zeros((0, 3))
        return np.concatenate(self.object_clouds, axis=0)


@dataclass(frozen=True)
class HeatmapParams:
    """Spreads, focal exponents and gating constants for both stages.

    sigma_c / sigma_b are measured in coarse-voxel units so their defaults
    stay resolution-independent.
    """

    sigma_c: float = 6.0
    sigma_b: float = 4.0
    alpha: float = 4.0
    gamma: float = 2.0
    beta: float = 10.0
    epsilon: float = 0.3
    kappa: float = 0.5

    def __post_init__(self):
        if self.sigma_c <= 0 or self.sigma_b <= 0:
            raise DataError("heatmap spreads must be positive")
        if not (0.0 < self.kappa < 1.0):
            raise DataError(f"keep threshold kappa must lie in (0, 1), got {self.kappa}")


def roi_target(grid: SparseVoxelGrid, gt: SceneGroundTruth, params: HeatmapParams) -> np.ndarray:
    """Coarse-stage target: the average of two Gaussian falloffs, one on the
    distance to the nearest object center, one on the distance to the nearest
    model surface point. Distances are in coarse-voxel units. Empty scenes
    yield all zeros.
    """
    n = len(grid)
    if gt.n_objects == 0 or n == 0:
        return np.zeros(n)
    pos = grid.centers() / grid.resolution
    centers = gt.centroids / grid.resolution
    boundary = gt.all_points() / grid.resolution
    d_center = cKDTree(centers).query(pos)[0]
    d_boundary = cKDTree(boundary).query(pos)[0]
    return 0.5 * (
        np.exp(-(d_center**2) / params.sigma_c**2)
        + np.exp(-(d_boundary**2) / params.sigma_b**2)
    )


def gaussian_focal_loss(pred: np.ndarray, target: np.ndarray, alpha: float = 4.0, gamma: float = 2.0):
    """Gaussian focal loss, mean over voxels; returns (loss, dloss/dpred).

    Per voxel: -H (1-p)^gamma log p - (1-H)^alpha p^gamma log(1-p) with
    predictions clamped into (0, 1).
    """
    p = np.clip(np.asarray(pred, dtype=np.float64), _CLAMP, 1.0 - _CLAMP)
    h = np.asarray(target, dtype=np.float64)
    if p.shape != h.shape:
        raise DataError(f"prediction shape {p.shape} != target shape {h.shape}")
    n = max(1, p.size)
    pos = -h * (1.0 - p) ** gamma * np.log(p)
    neg = -((1.0 - h) ** alpha) * p**gamma * np.log(1.0 - p)
    loss = float((pos + neg).sum() / n)
    dpos = -h * ((1.0 - p) ** gamma / p - gamma * (1.0 - p) ** (gamma - 1.0) * np.log(p))
    dneg = -((1.0 - h) ** alpha) * (gamma * p ** (gamma - 1.0) * np.log(1.0 - p) - p**gamma / (1.0 - p))
    grad = (dpos + dneg) / n
    grad = np.where((pred > _CLAMP) & (pred < 1.0 - _CLAMP), grad, 0.0)
    return loss, grad


def soft_suppress(pred: np.ndarray, params: HeatmapParams) -> tuple[np.ndarray, np.ndarray]:
    """Sigmoid soft-attention gate over heatmap scores.

    a_i = sigmoid(beta * (h_i - epsilon)); returns (a, kept rows with
    a > kappa). The attention weights are also usable for optional feature
    re-weighting.
    """
    h = np.asarray(pred, dtype=np.float64)
    a = 1.0 / (1.0 + np.exp(-params.beta * (h - params.epsilon)))
    kept = np.nonzero(a > params.kappa)[0]
    return a, kept


def objectness_target(grid: SparseVoxelGrid, gt: SceneGroundTruth) -> np.ndarray:
    """Binary target: 1 where any model point of any object falls in the
    voxel (occupancy test by quantizing the clouds at the grid resolution)."""
    y = np.zeros(len(grid), dtype=np.float64)
    if gt.n_objects == 0 or len(grid) == 0:
        return y
    pts = gt.all_points()
    occ = np.floor((pts - grid.origin) / grid.resolution).astype(np.int64)
    occ_keys = np.unique(pack_index(occ))
    rows = np.isin(grid.keys(), occ_keys)
    y[rows] = 1.0
    return y


def voxel_object_assignment(grid: SparseVoxelGrid, gt: SceneGroundTruth) -> np.ndarray:
    """Object index owning each voxel, -1 for background.

    A voxel belongs to the object with the most model points inside it; ties
    go to the object whose centroid is nearest to the voxel center.
    """
    owner = np.full(len(grid), -1, dtype=np.int64)
    if gt.n_objects == 0 or len(grid) == 0:
        return owner
    counts = np.zeros((len(grid), gt.n_objects), dtype=np.int64)
    for j, cloud in enumerate(gt.object_clouds):
        idx = np.floor((cloud - grid.origin) / grid.resolution).astype(np.int64)
        rows = grid.row_lookup(idx)
        rows = rows[rows >= 0]
        if rows.size:
            counts[:, j] += np.bincount(rows, minlength=len(grid))
    occupied = counts.sum(axis=1) > 0
    if not occupied.any():
        return owner
    best = counts[occupied].max(axis=1)
    tied = counts[occupied] == best[:, None]
    dist = np.linalg.norm(grid.centers()[occupied][:, None, :] - gt.centroids[None, :, :], axis=2)
    dist = np.where(tied, dist, np.inf)
    owner[occupied] = np.argmin(dist, axis=1)
    return owner


def focal_loss(pred: np.ndarray, target: np.ndarray, gamma_f: float = 2.0, alpha_f: float = 0.25):
    """Binary focal loss summed over voxels, normalized by max(1, positives).

    Returns (loss, dloss/dpred).
    """
    p = np.clip(np.asarray(pred, dtype=np.float64), _CLAMP, 1.0 - _CLAMP)
    y = np.asarray(target, dtype=np.float64)
    if p.shape != y.shape:
        raise DataError(f"prediction shape {p.shape} != target shape {y.shape}")
    n_pos = max(1.0, float(y.sum()))
    pos = -alpha_f * (1.0 - p) ** gamma_f * np.log(p)
    neg = -(1.0 - alpha_f) * p**gamma_f * np.log(1.0 - p)
    loss = float((y * pos + (1.0 - y) * neg).sum() / n_pos)
    dpos = -alpha_f * ((1.0 - p) ** gamma_f / p - gamma_f * (1.0 - p) ** (gamma_f - 1.0) * np.log(p))
    dneg = -(1.0 - alpha_f) * (gamma_f * p ** (gamma_f - 1.0) * np.log(1.0 - p) - p**gamma_f / (1.0 - p))
    grad = (y * dpos + (1.0 - y) * dneg) / n_pos
    grad = np.where((pred > _CLAMP) & (pred < 1.0 - _CLAMP), grad, 0.0)
    return loss, grad


def adaptive_topk(
    scores: np.ndarray,
    indices: np.ndarray,
    ratio: float,
    k_min: int = 1,
    k_max: int | None = None,
) -> tuple[np.ndarray, int]:
    """Keep the K = clamp(ceil(ratio * N), k_min, min(k_max, N)) best-scoring
    rows; ties break toward the lexicographically smaller voxel index and the
    output rows preserve index-sorted order.
    """
    if not (0.0 < ratio <= 1.0):
        raise DataError(f"topK ratio must lie in (0, 1], got {ratio}")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    n = scores.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0
    k = int(np.ceil(ratio * n))
    k = max(k, int(k_min))
    cap = n if k_max is None else min(int(k_max), n)
    k = min(k, cap)
    lex = lexsort_rows(idx)
    lex_rank = np.empty(n, dtype=np.int64)
    lex_rank[lex] = np.arange(n)
    order = np.lexsort((lex_rank, -scores))  # score desc, then smaller index first
    kept = np.sort(order[:k])
    return kept, k


def class_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Inverse-frequency class weights, mean-1 normalized over present classes.

    Raw weight for class c with count N_c out of N samples across K present
    classes is N / (K * N_c); absent classes get weight 0.
    """
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    present = counts > 0
    k = max(1, int(present.sum()))
    w = np.zeros(n_classes)
    w[present] = y.size / (k * counts[present])
    mean_w = w[present].mean() if present.any() else 1.0
    return w / mean_w if mean_w > 0 else w


def weighted_cross_entropy(logits: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None):
    """Class-weighted cross entropy over rows, mean reduction weighted by the
    per-sample class weight. Returns (loss, dloss/dlogits).

    weights defaults to inverse class frequency in the batch, mean-1
    normalized.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if z.ndim != 2 or z.shape[0] != y.shape[0]:
        raise DataError(f"logits {z.shape} incompatible with {y.shape[0]} labels")
    n, k = z.shape
    if y.size and (y.min() < 0 or y.max() >= k):
        raise DataError("labels out of range for logit width")
    if weights is None:
        weights = class_weights(y, k)
    w = np.asarray(weights, dtype=np.float64)[y]
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    softmax = ez / ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(ez.sum(axis=1, keepdims=True))
    n_eff = max(1, n)
    loss = float(-(w * logp[np.arange(n), y]).sum() / n_eff)
    grad = softmax * w[:, None]
    grad[np.arange(n), y] -= w
    return loss, grad / n_eff


def conditioning_bias(heat_features: np.ndarray, projection: np.ndarray) -> np.ndarray:
    """Linear projection of heatmap features, applied as an additive bias to
    the classifier's hidden activation."""
    f = np.asarray(heat_features, dtype=np.float64)
    p = np.asarray(projection, dtype=np.float64)
    if f.ndim != 2 or p.ndim != 2 or f.shape[1] != p.shape[0]:
        raise DataError(f"cannot project features {f.shape} with matrix {p.shape}")
    return f @ p
