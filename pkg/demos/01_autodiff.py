"""
Reverse-mode differentiation with the tape
==========================================

Record a small computation, differentiate it, and compare with finite
differences. The same engine trains both networks.
"""

import numpy as np

from nrsfm import autodiff as ad

rng = np.random.default_rng(0)

# leaves that want gradients are created with requires_grad=True
W = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
x = ad.Tensor(rng.normal(size=(4, 2)))

with ad.Tape() as tape:
    h = ad.relu(ad.matmul(W, x))
    loss = ad.sum(ad.square(h))
(g_W,) = tape.backward(loss, [W])
print("loss", loss.item())

# central differences on one entry
eps = 1e-6
W.data[1, 2] += eps
up = ad.sum(ad.square(ad.relu(ad.matmul(W, x)))).item()
W.data[1, 2] -= 2 * eps
down = ad.sum(ad.square(ad.relu(ad.matmul(W, x)))).item()
W.data[1, 2] += eps
print("dL/dW[1,2] tape %.8f  numeric %.8f" % (g_W[1, 2], (up - down) / (2 * eps)))

# the Rodrigues primitive stays accurate near the identity
theta = ad.Tensor([1e-9, 0.0, 0.0], requires_grad=True)
value, (g,) = ad.grad(lambda: ad.sum(ad.rodrigues(theta) * np.eye(3)[[1, 0, 2]]), [theta])
print("gradient of R[0,1] + R[1,0] + R[2,2] at the identity", g)

# pseudo-Huber: quadratic near zero, linear in the tail
for r in (1e-4, 1e-2, 1.0):
    print("pseudo-Huber(%g) = %.6g" % (r, ad.pseudo_huber(np.array([r]), 0.01).item()))

# tapes refuse to be reused, and non-finite values are caught at the op
try:
    ad.div(ad.Tensor(1.0), ad.Tensor(0.0))
except ad.NonFiniteError as exc:
    print("caught:", exc)
