"""Two sources left and right of an occluder: min-cost selection picks the one that sees.
Then a box moving with the camera: the auto-mask drops it.

Run: python demos/occlusion_and_mask.py
"""
import numpy as np

from physvo.geometry import Intrinsics, Pose, warp
from physvo.losses import auto_mask, combined_cost, geometric_loss, identity_cost, min_cost_select, photometric_loss
from physvo.synth import dynamic_box_scene, occlusion_scene, render

k = Intrinsics(64.0, 64.0, 47.5, 35.5, 96, 72)

# --- occlusion
scene = occlusion_scene()
pt, pa, pb = Pose(), Pose(np.eye(3), [-0.5, 0, 0]), Pose(np.eye(3), [0.5, 0, 0])
ft, fa, fb = (render(scene, p, k) for p in (pt, pa, pb))
costs = []
for f, p in ((fa, pa), (fb, pb)):
    wr = warp(ft.depth, p.inverse() @ pt, k, f.image, f.depth)
    costs.append(combined_cost(photometric_loss(ft.image, wr.image, wr.valid), geometric_loss(wr.comp_depth, wr.proj_depth, wr.valid)))
sel = min_cost_select(costs)
both = costs[0].valid & costs[1].valid
print("pixels seen by both sources   ", both.sum())
print("picked source A / B           ", (sel.source_index == 0).sum(), (sel.source_index == 1).sum())
print("mean cost: average vs min     ", ((costs[0].data + costs[1].data) / 2)[both].mean(), sel.cost[both].mean())

# --- moving box: it keeps its place in the image, so the unwarped frame explains it better
v = np.array([0.1, 0.0, 0.0])
scene = dynamic_box_scene(velocity=v)
poses = [Pose(np.eye(3), v * i) for i in range(3)]
frames = [render(scene, p, k, frame_t=i) for i, p in enumerate(poses)]
photo, ident = [], []
for s in (0, 2):
    wr = warp(frames[1].depth, poses[s].inverse() @ poses[1], k, frames[s].image, frames[s].depth)
    photo.append(photometric_loss(frames[1].image, wr.image, wr.valid))
    ident.append(identity_cost(frames[1].image, frames[s].image))
keep = auto_mask(photo, ident).keep
box = frames[1].occlusion_labels == 2
print("box pixels masked out         ", 1 - keep[box].mean())
print("static pixels kept            ", keep[~box].mean())
