"""
Rigid structure from orthographic views
=======================================

Factor a handful of views of one rigid object into cameras and a structure,
then show that flat objects are rejected.
"""

import numpy as np

from nrsfm.classical import (DegenerateStructureError, feasibility_check, procrustes_align,
                             rigid_factorize)
from nrsfm.evaluation import mpjpe
from nrsfm.geometry import center_structure, project, sample_rotations
from nrsfm.synthgen import SynthConfig, generate_rigid

ds = generate_rigid(SynthConfig(K=10, views_per_shape=5, seed=0, test_fraction=0.0))
X_true = center_structure(ds.gt["rotations"][0].T @ ds.gt["structures"][0])

sol = rigid_factorize(ds.Y)
print("reprojection residual", sol.residual)
print("first camera (gauge)", sol.M_stack[:2].round(12))
# orthographic views fix the structure only up to a mirror, so align with reflections allowed
print("aligned structure error", mpjpe(procrustes_align(sol.X, X_true), X_true))

# counting argument for N views of K points
print(feasibility_check(N=5, K=10))

rng = np.random.default_rng(3)
flat = np.vstack([rng.normal(size=(2, 10)), np.zeros((1, 10))])
try:
    rigid_factorize(project(sample_rotations(rng, 5) @ flat))
except DegenerateStructureError as exc:
    print("planar input:", exc)
