#!/usr/bin/env python3
"""Cameras and multi-view fusion.

Builds a small synthetic bin scene, renders three depth views, fuses them
into a world-frame point cloud and writes a PLY you can open in any viewer.
Also demonstrates the exact project/backproject round trip and the 16-bit
depth PNG codec.
"""

import os
import tempfile

import numpy as np

from sparsepose.camera import DepthImage, backproject, load_depth_png, project, save_depth_png
from sparsepose.fusion import fuse_views, write_ply_points
from sparsepose.synthetic import make_primitives, render_depth, sample_scene

out_dir = tempfile.mkdtemp(prefix="sparsepose_demo_")
print(f"writing outputs to {out_dir}\n")

# -- a scene with three parts and the default 3-camera arc ------------------
library = make_primitives()
spec = sample_scene(library, (-0.08, -0.08, 0.0), (0.08, 0.08, 0.05), n_objects=3, seed=1)
print(f"scene: {[inst.name for inst in spec.instances]}")

depths = [render_depth(spec, library, i) for i in range(len(spec.cameras))]
for i, d in enumerate(depths):
    valid = d.valid_mask()
    print(f"view {i}: {valid.sum():6d} valid pixels, depth range "
          f"[{d.values[valid].min():.3f}, {d.values[valid].max():.3f}] m")

# -- the round trip: backproject then reproject ------------------------------
intr, extr = spec.cameras[0]
pts = backproject(depths[0], intr, extr)
pix, z, in_front = project(pts, intr, extr)
vv, uu = np.nonzero(depths[0].valid_mask())
order = np.lexsort((uu, vv))
err = np.abs(pix - np.stack([uu[order], vv[order]], axis=1)).max()
print(f"\nproject(backproject) pixel error: {err:.2e} px (exact by construction)")

# -- fusion -------------------------------------------------------------------
cloud = fuse_views(depths, spec.cameras, spec.workspace)
print(f"fused cloud: {len(cloud)} points from {len(depths)} views")
ply = os.path.join(out_dir, "fused.ply")
write_ply_points(ply, cloud.points)
print(f"wrote {ply}")

# -- 16-bit depth PNG round trip ---------------------------------------------
png = os.path.join(out_dir, "depth_00.png")
save_depth_png(png, depths[0], scale=5e-5)
reloaded = load_depth_png(png, scale=5e-5)
quant = np.abs(reloaded.values - depths[0].values).max()
save_depth_png(os.path.join(out_dir, "depth_00_again.png"), reloaded, scale=5e-5)
identical = open(png, "rb").read() == open(os.path.join(out_dir, "depth_00_again.png"), "rb").read()
print(f"PNG quantization {quant*1000:.4f} mm at 0.05 mm scale; re-save byte-identical: {identical}")
