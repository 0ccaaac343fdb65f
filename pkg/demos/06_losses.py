"""
The three training objectives
=============================

Reprojection, canonicalization and in-plane equivariance, evaluated on a
randomly initialized model and on hand-built cases where they vanish.
"""

import numpy as np

from nrsfm.geometry import inplane_rotation, rot_expm, sample_rotations
from nrsfm.losses import (LossConfig, canonicalization_loss_l2, equivariance_loss_l3,
                          reprojection_loss_l1, total_loss)
from nrsfm.networks import TrunkConfig, init_weights
from nrsfm.shapemodel import reconstruct

rng = np.random.default_rng(0)
K, D = 8, 2
S = rng.normal(size=(3 * D, K))
alpha = rng.normal(size=(4, D))
theta = rng.normal(size=(4, 3))
Y = (rot_expm(theta) @ reconstruct(alpha, S))[:, :2]
v = np.ones((4, K))

print("reprojection at the generating factors", reprojection_loss_l1(Y, v, alpha, theta, S).item())

# a canonicalizer that knows the right coefficients gives zero loss
X = reconstruct(alpha, S)
print("canonicalization with a perfect psi",
      canonicalization_loss_l2(X, sample_rotations(rng, 4), lambda Xr, training: alpha, S).item())

# an equivariant factorizer: rotating the input rotates the viewpoint about z
def phi(Yt, vt, training):
    return alpha, theta

print("equivariance with identity in-plane rotations",
      equivariance_loss_l3(Y, v, np.repeat(np.eye(2)[None], 4, axis=0), phi, S).item())
print("equivariance of a factorizer that ignores the rotation",
      equivariance_loss_l3(Y, v, np.repeat(inplane_rotation(0.7)[0][None], 4, axis=0), phi, S).item())

weights = init_weights(0, K, D, TrunkConfig(num_blocks=1, outer=32, bottleneck=16))
for variant in ("base", "equiv", "full", "canon"):
    _, parts = total_loss(Y, v, weights, LossConfig(variant=variant), np.random.default_rng(1))
    print(variant.ljust(6), {k: round(val, 5) for k, val in parts.items()})
