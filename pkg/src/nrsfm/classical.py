"""Classical factorization baselines used as oracles.

* rigid orthographic factorization (rank-3 SVD, metric upgrade, gauge fixing)
* single-view fitting of pose and shape coefficients for a known basis with
  damped Gauss-Newton (Levenberg-Marquardt) and random restarts
* degree-of-freedom counting for SFM / NR-SFM problems
"""

from dataclasses import dataclass

import numpy as np

from .geometry import center_view, rot_expm, rot_expm_jacobian, rot_log, sample_rotation
from .shapemodel import PoseEstimate, ShapeBasis

__all__ = [
    "DegenerateStructureError", "MetricUpgradeError", "RigidSfmSolution", "rigid_factorize",
    "procrustes_align", "MonocularFit", "monocular_fit", "Feasibility", "feasibility_check",
]


class DegenerateStructureError(ValueError):
    pass


class MetricUpgradeError(ValueError):
    pass


@dataclass
class RigidSfmSolution:
    M_stack: np.ndarray
    X: np.ndarray
    rotations: np.ndarray
    residual: float

    def reproject(self):
        return (self.M_stack @ self.X).reshape(-1, 2, self.X.shape[1])


def _gram_row(a, b):
    # coefficients of a G b^T in the 6 free entries of a symmetric G
    return np.array([a[0] * b[0], a[0] * b[1] + a[1] * b[0], a[0] * b[2] + a[2] * b[0],
                     a[1] * b[1], a[1] * b[2] + a[2] * b[1], a[2] * b[2]])


def _complete_rotation(M):
    """Nearest row-orthonormal 2x3 matrix, extended to SO(3) by a cross product."""
    U, _, Vt = np.linalg.svd(M, full_matrices=False)
    top = U @ Vt
    return np.vstack([top, np.cross(top[0], top[1])])


def rigid_factorize(Y, rank_tol=1e-9):
    """Factor N fully visible views (N, 2, K) into cameras and one structure.

    The first camera is fixed to ``[I2 0]``. Orthographic data leaves a global
    mirror ambiguity (depth reversal), so the structure matches ground truth up
    to an orthogonal transform.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 3 or Y.shape[1] != 2:
        raise ValueError(f"expected views of shape (N, 2, K), got {Y.shape}")
    N, _, K = Y.shape
    if N < 2 or K < 3:
        raise ValueError("rigid factorization needs N >= 2 views and K >= 3 points")
    W = center_view(Y, np.ones((N, K))).reshape(2 * N, K)
    U, s, Vt = np.linalg.svd(W, full_matrices=False)
    if s[0] == 0 or s[2] <= rank_tol * s[0]:
        raise DegenerateStructureError("measurements have rank < 3; structure is degenerate")
    root = np.sqrt(s[:3])
    M_hat = U[:, :3] * root
    X_hat = root[:, None] * Vt[:3]

    rows, rhs = [], []
    for n in range(N):
        a, b = M_hat[2 * n], M_hat[2 * n + 1]
        rows += [_gram_row(a, a), _gram_row(b, b), _gram_row(a, b)]
        rhs += [1.0, 1.0, 0.0]
    g = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)[0]
    G = np.array([[g[0], g[1], g[2]], [g[1], g[3], g[4]], [g[2], g[4], g[5]]])
    try:
        A = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        raise MetricUpgradeError("metric upgrade failed: Gram matrix is not positive definite") from None
    M = M_hat @ A
    X = np.linalg.solve(A, X_hat)

    R1 = _complete_rotation(M[:2])
    M = M @ R1.T
    X = R1 @ X
    rotations = np.array([_complete_rotation(M[2 * n:2 * n + 2]) for n in range(N)])
    residual = float(np.abs(W - M @ X).max())
    return RigidSfmSolution(M, X, rotations, residual)


def procrustes_align(X, X_ref, allow_reflection=True):
    """Orthogonal transform of centered ``X`` that best matches ``X_ref`` (least squares)."""
    X = X - X.mean(axis=1, keepdims=True)
    ref = X_ref - X_ref.mean(axis=1, keepdims=True)
    U, _, Vt = np.linalg.svd(ref @ X.T)
    Q = U @ Vt
    if not allow_reflection and np.linalg.det(Q) < 0:
        U[:, -1] = -U[:, -1]
        Q = U @ Vt
    return Q @ X


@dataclass
class MonocularFit:
    pose: PoseEstimate
    residual: float
    iterations: int
    restarts: int


def _centered_visible(P, vis):
    return P[:, vis] - P[:, vis].mean(axis=1, keepdims=True)


def _residual_and_jacobian(alpha, theta, blocks, Yc, vis):
    D = len(alpha)
    X = np.tensordot(alpha, blocks, axes=1)
    R, dR = rot_expm(theta), rot_expm_jacobian(theta)
    reproj = _centered_visible((R @ X)[:2], vis)
    r = (Yc - reproj).ravel()
    J = np.empty((r.size, D + 3))
    for d in range(D):
        J[:, d] = -_centered_visible((R @ blocks[d])[:2], vis).ravel()
    for i in range(3):
        J[:, D + i] = -_centered_visible((dR[i] @ X)[:2], vis).ravel()
    return r, J


def _alpha_given_theta(theta, blocks, Yc, vis):
    R = rot_expm(theta)
    A = np.stack([_centered_visible((R @ b)[:2], vis).ravel() for b in blocks], axis=1)
    return np.linalg.lstsq(A, Yc.ravel(), rcond=None)[0]


def _levenberg_marquardt(alpha, theta, blocks, Yc, vis, max_iter, gtol):
    D = len(alpha)
    x = np.concatenate([alpha, theta])
    r, J = _residual_and_jacobian(x[:D], x[D:], blocks, Yc, vis)
    cost = r @ r
    lam = 1e-3
    it = 0
    for it in range(1, max_iter + 1):
        g = J.T @ r
        if np.abs(g).max() < gtol or cost < 1e-30:
            break
        H = J.T @ J
        step = np.linalg.solve(H + lam * np.diag(np.maximum(np.diag(H), 1e-12)), -g)
        x_new = x + step
        r_new, J_new = _residual_and_jacobian(x_new[:D], x_new[D:], blocks, Yc, vis)
        cost_new = r_new @ r_new
        if np.isfinite(cost_new) and cost_new < cost:
            x, r, J, cost = x_new, r_new, J_new, cost_new
            lam = max(lam / 10.0, 1e-15)
        else:
            lam *= 10.0
            if lam > 1e16:
                break
    return x, cost, it


def monocular_fit(view, S, restarts=8, rng=None, max_iter=200, gtol=1e-12):
    """Fit ``(alpha, theta)`` to one view for a known basis by least squares.

    Minimizes the squared reprojection error of visible keypoints after
    removing the visible centroid from both sides. Each restart draws a random
    rotation and solves the coefficients linearly before refining jointly.
    The reported residual is the RMS 2D error over visible keypoints.
    """
    basis = S if isinstance(S, ShapeBasis) else ShapeBasis(S)
    D, K = basis.D, basis.K
    if view.K != K:
        raise ValueError(f"view has {view.K} keypoints, basis has {K}")
    if K < 3 + D / 2:
        raise ValueError(f"K={K} keypoints cannot determine {D} shape coefficients (need K >= 3 + D/2)")
    vis = view.v > 0
    if 2 * vis.sum() < 6 + D:
        raise ValueError(f"{vis.sum()} visible keypoints are too few for {D + 6} unknowns")
    rng = np.random.default_rng(rng)
    blocks = basis.blocks()
    Yc = _centered_visible(view.Y, vis)
    best = None
    for _ in range(restarts):
        theta0 = rot_log(sample_rotation(rng))
        alpha0 = _alpha_given_theta(theta0, blocks, Yc, vis)
        x, cost, it = _levenberg_marquardt(alpha0, theta0, blocks, Yc, vis, max_iter, gtol)
        if not np.isfinite(cost):
            continue
        if best is None or cost < best[1]:
            best = (x, cost, it)
    if best is None:
        raise RuntimeError("every restart diverged")
    x, cost, it = best
    return MonocularFit(PoseEstimate(x[:D].copy(), x[D:].copy()),
                        float(np.sqrt(cost / vis.sum())), it, restarts)


@dataclass
class Feasibility:
    constraints: int
    unknowns: int
    gauge: int
    joint: bool
    per_view: bool | None
    feasible: bool


def feasibility_check(N, K, D=None):
    """Count equations and unknowns of the factorization problem.

    Without ``D`` this is rigid SFM: ``2NK >= 6N + 3K - 9``. With a basis of
    dimension ``D`` the joint count is ``2NK >= 6N + ND + 3DK - 9``, and the
    verdict is the per-view bound ``K >= 3 + D/2`` (``2K >= 6 + D``), which is
    what any number of views sharing one basis needs.
    """
    for name, val in (("N", N), ("K", K)) + ((("D", D),) if D is not None else ()):
        if int(val) != val or val < 1:
            raise ValueError(f"{name} must be a positive integer")
    constraints = 2 * N * K
    if D is None:
        unknowns = 6 * N + 3 * K
        joint = constraints >= unknowns - 9
        return Feasibility(constraints, unknowns, 9, joint, None, joint)
    unknowns = 6 * N + N * D + 3 * D * K
    joint = constraints >= unknowns - 9
    per_view = 2 * K >= 6 + D
    return Feasibility(constraints, unknowns, 9, joint, per_view, per_view)
