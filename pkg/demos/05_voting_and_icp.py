#!/usr/bin/env python3
"""Per-voxel voting, clustering and ICP on exact ground truth.

Feeds ground-truth targets through the inference machinery (each foreground
voxel votes its exact offset and rotation) to show the voting geometry:
predicted centers collapse onto the object centroids, DBSCAN separates the
objects, the chordal mean recovers the rotations, and the per-cluster ICP
leaves correct poses in place. Metrics close the loop.
"""

import tempfile

import numpy as np

from sparsepose.config import PipelineConfig
from sparsepose.metrics import add, add_s, mssd
from sparsepose.pipeline import build_input_grid, estimate_poses, oracle_votes
from sparsepose.synthetic import export_scene_bundle, load_scene_bundle, make_primitives, sample_scene
from sparsepose.voting import aggregate_votes, dbscan

library = make_primitives()
spec = sample_scene(library, (-0.09, -0.09, 0.0), (0.09, 0.09, 0.06), n_objects=5, seed=4)
bundle_dir = tempfile.mkdtemp(prefix="sparsepose_scene_")
export_scene_bundle(spec, library, bundle_dir)
bundle = load_scene_bundle(bundle_dir)

cfg = PipelineConfig(theta=0.002)
fine, cloud, _ = build_input_grid(bundle, cfg, "cloud")
rotations = np.asarray([inst.rotation for inst in bundle.instances])
votes = oracle_votes(fine, bundle.gt, rotations)
print(f"{len(votes)} votes from foreground voxels of {bundle.gt.n_objects} objects")

centers = votes.predicted_centers()
spread = np.linalg.norm(
    centers - bundle.gt.centroids[np.argmin(
        np.linalg.norm(centers[:, None] - bundle.gt.centroids[None], axis=2), axis=1)],
    axis=1,
)
print(f"vote-to-centroid spread: max {spread.max()*1e6:.2f} micrometers (exact targets)")

labels = dbscan(centers, cfg.dbscan_eps, cfg.dbscan_min_pts)
print(f"DBSCAN: {labels.max()+1} clusters, {(labels<0).sum()} noise votes")

poses = aggregate_votes(votes, labels, cfg.vote_top_fraction)
print(f"aggregated {len(poses)} poses (support: {[p.support for p in poses]})\n")

final, _ = estimate_poses(bundle, cfg, oracle=True)
print("after per-cluster ICP refinement:")
for inst in bundle.instances:
    model = bundle.models[inst.class_id]
    best = min(
        (p for p in final if p.class_id == inst.class_id),
        key=lambda p: np.linalg.norm(p.translation - inst.translation),
    )
    e_add = add(best.rotation, best.translation, inst.rotation, inst.translation, model.cloud)
    e_adds = add_s(best.rotation, best.translation, inst.rotation, inst.translation, model.cloud)
    e_mssd = mssd(best.rotation, best.translation, inst.rotation, inst.translation,
                  model.mesh.vertices, model.symmetries)
    print(f"  {model.name:17s} ADD {e_add*1000:6.3f} mm   ADD-S {e_adds*1000:6.3f} mm   "
          f"MSSD {e_mssd*1000:6.3f} mm")
