"""
Rotations: exponential map, logarithm and Haar sampling
=======================================================
"""

import numpy as np

from nrsfm.geometry import (inplane_rotation, rot_expm, rot_log, rotation_angle,
                            sample_inplane_rotation, sample_rotations)

rng = np.random.default_rng(1)

theta = np.array([0.3, -1.2, 0.5])
R = rot_expm(theta)
print("R R^T - I max", np.abs(R @ R.T - np.eye(3)).max())
print("det R", np.linalg.det(R))
print("log(exp(theta))", rot_log(R), "theta", theta)

# close to pi the logarithm still recovers the axis
near_pi = np.pi - 1e-7
print("angle near pi", rotation_angle(rot_expm([0.0, near_pi, 0.0])), near_pi)

# uniform (Haar) rotations have zero mean trace
Rs = sample_rotations(rng, 100_000)
print("mean trace of Haar samples", np.trace(Rs, axis1=1, axis2=2).mean())
hist, _ = np.histogram(rotation_angle(Rs), bins=6, range=(0, np.pi))
print("angle histogram (density grows like 1 - cos)", hist)

# in-plane rotations act on 2D keypoints; a 3D rotation about z projects to the same thing
r2, r3 = sample_inplane_rotation(rng, 2)
X = rng.normal(size=(3, 5))
print("r2 @ project(X) equals project(r3 @ X):", np.allclose(r2[0] @ X[:2], (r3[0] @ X)[:2]))
print("quarter turn\n", inplane_rotation(np.pi / 2)[0].round(12))
