"""Training objectives: reprojection, canonicalization and in-plane equivariance."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import sample_inplane_rotation, sample_rotations
from .shapemodel import reconstruct

__all__ = [
    "VARIANTS", "LossConfig", "pseudo_huber", "reprojection_residual",
    "reprojection_loss_l1", "canonicalization_loss_l2", "equivariance_loss_l3",
    "total_loss",
]

# variant -> loss terms that enter the objective
VARIANTS = {
    "base": ("l1",),
    "equiv": ("l3",),
    "full": ("l3", "l2"),
    "canon": ("l1", "l2"),
}


@dataclass
class LossConfig:
    epsilon: float = 0.01
    variant: str = "full"
    weights: dict = field(default_factory=lambda: {"l1": 1.0, "l2": 1.0, "l3": 1.0})
    detach_psi_input: bool = False
    estimate_translation: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("loss weights must be non-negative")


def pseudo_huber(z, epsilon=0.01):
    """Pseudo-Huber norm of a single vector (plain float)."""
    z = np.asarray(z, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("non-finite input")
    return float(ad.pseudo_huber(z, epsilon, axis=-1).data)


def _visible_mean(x, v, count):
    return (x * v[:, None, :]).sum(axis=2, keepdims=True) / count[:, None, None]


def reprojection_residual(target, v, alpha, theta, S, estimate_translation=False):
    """``target - M(theta) X(alpha)`` per keypoint, shape (B, 2, K).

    With ``estimate_translation`` the reprojection is shifted so that its
    visible centroid matches the visible centroid of ``target``.
    """
    target = ad.as_tensor(target)
    v = np.asarray(v, dtype=np.float64)
    X = reconstruct(alpha, S)
    R = ad.rodrigues(theta)
    reproj = R[:, :2, :] @ X
    if estimate_translation:
        count = v.sum(axis=1)
        if np.any(count <= 0):
            raise ValueError("translation estimate needs a visible keypoint in every view")
        shift = _visible_mean(target, v, count) - _visible_mean(reproj, v, count)
        reproj = reproj + shift
    return target - reproj


def _masked_mean_norm(residual, v, epsilon, axis):
    K = residual.shape[-1]
    if K == 0:
        raise ValueError("no keypoints")
    per_point = ad.pseudo_huber(residual, epsilon, axis=axis)
    if v is not None:
        per_point = per_point * v
    return per_point.sum(axis=1) * (1.0 / K)


def reprojection_loss_l1(Y, v, alpha, theta, S, epsilon=0.01, estimate_translation=False,
                         reduce=True):
    """Visibility-weighted pseudo-Huber reprojection error divided by K."""
    v = np.asarray(v, dtype=np.float64)
    r = reprojection_residual(Y, v, alpha, theta, S, estimate_translation)
    per_view = _masked_mean_norm(r, v, epsilon, axis=1)
    return per_view.mean() if reduce else per_view


def canonicalization_loss_l2(X, R, psi, S, epsilon=0.01, training=False, detach_input=False,
                             reduce=True):
    """Pseudo-Huber gap between ``X`` and the basis shape that ``psi`` predicts from ``R X``.

    ``psi`` maps a (B, 3, K) structure to (B, D) coefficients of ``S``.
    """
    X = ad.as_tensor(X)
    if detach_input:
        X = X.detach()
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (X.shape[0], 3, 3):
        raise ad.ShapeError(f"expected {X.shape[0]} rotations, got shape {R.shape}")
    alpha_hat = psi(ad.matmul(R, X), training)
    X_hat = reconstruct(alpha_hat, S)
    per_view = _masked_mean_norm(X - X_hat, None, epsilon, axis=1)
    return per_view.mean() if reduce else per_view


def equivariance_loss_l3(Y, v, r_z, phi, S, epsilon=0.01, training=False, alpha=None,
                         estimate_translation=False, reduce=True):
    """Reprojection of the unrotated input's shape under the rotated input's viewpoint.

    ``phi`` maps (Y, v) to (alpha, theta). ``alpha`` may be passed in when it
    has already been computed from the unrotated views.
    """
    v = np.asarray(v, dtype=np.float64)
    r_z = np.asarray(r_z, dtype=np.float64)
    Y = ad.as_tensor(Y)
    if r_z.shape != (Y.shape[0], 2, 2):
        raise ad.ShapeError(f"expected {Y.shape[0]} in-plane rotations, got shape {r_z.shape}")
    if alpha is None:
        alpha, _ = phi(Y, v, training)
    Y_rot = ad.Tensor(np.matmul(r_z, Y.data))
    _, theta_rot = phi(Y_rot, v, training)
    r = reprojection_residual(Y_rot, v, alpha, theta_rot, S, estimate_translation)
    per_view = _masked_mean_norm(r, v, epsilon, axis=1)
    return per_view.mean() if reduce else per_view


def total_loss(Y, v, model, cfg, rng, training=True):
    """Weighted objective for ``cfg.variant`` and a dict of its terms.

    Draws one in-plane rotation and one SO(3) rotation per view from ``rng``
    when the variant needs them.
    """
    Y = ad.as_tensor(Y)
    v = np.asarray(v, dtype=np.float64)
    if Y.shape[0] == 0:
        raise ValueError("empty batch")
    terms = VARIANTS[cfg.variant]
    eps, S, B = cfg.epsilon, model.basis, Y.shape[0]
    alpha, theta = model.phi(Y, v, training)
    parts = {}
    if "l1" in terms:
        parts["l1"] = reprojection_loss_l1(Y, v, alpha, theta, S, eps, cfg.estimate_translation)
    if "l3" in terms:
        r_z, _ = sample_inplane_rotation(rng, B)
        parts["l3"] = equivariance_loss_l3(Y, v, r_z, model.phi, S, eps, training, alpha=alpha,
                                           estimate_translation=cfg.estimate_translation)
    if "l2" in terms:
        R_hat = sample_rotations(rng, B)
        X = reconstruct(alpha, S)
        parts["l2"] = canonicalization_loss_l2(X, R_hat, model.psi, S, eps, training,
                                               detach_input=cfg.detach_psi_input)
    total = None
    for name in terms:
        term = parts[name] * cfg.weights.get(name, 1.0)
        total = term if total is None else total + term
    breakdown = {name: t.item() for name, t in parts.items()}
    breakdown["total"] = total.item()
    return total, breakdown
