"""Render two views of a textured wall, warp one into the other and look at the loss terms.

Run: python demos/warp_and_losses.py
"""
import numpy as np

from physvo.geometry import Intrinsics, Pose, warp
from physvo.losses import LossConfig, combined_cost, geometric_loss, identity_cost, photometric_loss
from physvo.synth import make_sequence, textured_wall_scene

k = Intrinsics(64.0, 64.0, 31.5, 23.5, 64, 48)
poses = [Pose(), Pose(np.eye(3), [0.25, 0.0, 0.0])]  # 0.25 m sideways
target, source = make_sequence(textured_wall_scene(), poses, k)
cfg = LossConfig()

# correct relative pose: the warped source reproduces the target
wr = warp(target.depth, poses[1].inverse() @ poses[0], k, source.image, source.depth)
photo = photometric_loss(target.image, wr.image, wr.valid, cfg)
geo = geometric_loss(wr.comp_depth, wr.proj_depth, wr.valid, cfg)
cost = combined_cost(photo, geo, cfg)
print("valid pixels       ", wr.valid.mean())
print("photo  (true pose) ", photo.data[photo.valid].mean())
print("geo    (true pose) ", geo.data[geo.valid].mean())
print("unwarped source    ", identity_cost(target.image, source.image, cfg).data.mean())

# nudge the relative pose and watch both terms grow
for dx in (0.01, 0.03, 0.1):
    wrong = Pose(np.eye(3), [dx, 0.0, 0.0]) @ poses[1].inverse() @ poses[0]
    wr = warp(target.depth, wrong, k, source.image, source.depth)
    c = combined_cost(
        photometric_loss(target.image, wr.image, wr.valid, cfg),
        geometric_loss(wr.comp_depth, wr.proj_depth, wr.valid, cfg),
        cfg,
    )
    print(f"offset {dx:.2f} m  mean combined cost {c.data[c.valid].mean():.4f}")

# the depth term ignores a common scale of both depths
c, p = np.array([2.0, 5.0]), np.array([3.0, 4.0])
tight = LossConfig(epsilon=1e-12)
print("scale invariance   ", geometric_loss(c[None], p[None], np.ones((1, 2), bool), tight).data,
      geometric_loss(10 * c[None], 10 * p[None], np.ones((1, 2), bool), tight).data)
