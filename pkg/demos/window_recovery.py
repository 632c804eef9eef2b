"""Perturb the poses of a three-frame window by 5 cm / 0.5 deg and optimize them back,
holding the true depth fixed.

Run: python demos/window_recovery.py
"""
import numpy as np

from physvo.geometry import Intrinsics, Pose, rotation_angle
from physvo.optimize import OptimConfig, init_state, optimize_window
from physvo.synth import make_sequence, slanted_wall_scene

k = Intrinsics(48.0, 48.0, 47.5, 35.5, 96, 72)  # wide lens, 90 degrees across
gt = [Pose.exp([0.0375 * i, 0.005 * i, 0.1 * i, 0.0, 0.01 * i, 0.0]) for i in range(3)]
frames = make_sequence(slanted_wall_scene(), gt, k)
images, depths = [f.image for f in frames], [f.depth for f in frames]


def errors(state):
    t = max(np.linalg.norm(p.translation - q.translation) for p, q in zip(state.poses, gt))
    r = max(np.degrees(rotation_angle(p.rotation.T @ q.rotation)) for p, q in zip(state.poses, gt))
    return 1e3 * t, r


init = init_state(images, k, "perturbed", gt_poses=gt, gt_depths=depths, pose_noise=(0.05, 0.5), rng=0)
print("start   %.2f mm  %.4f deg" % errors(init))
for m in (0.0, 0.8):
    res = optimize_window(images, init, k, opt_cfg=OptimConfig(depth_lr_scale=0.0, momentum=m))
    print("momentum %.1f: %3d steps (%s), loss %.5f -> %.5f, %.2f mm  %.4f deg"
          % ((m, len(res.trace) - 1, res.converged, res.trace[0].loss, res.trace[-1].loss) + errors(res.state)))

# loss along the way, every tenth accepted step
print([round(e.loss, 5) for e in res.trace[::10]])
