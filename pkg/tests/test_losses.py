import numpy as np
import pytest

from nrsfm import autodiff as ad
from nrsfm.geometry import inplane_rotation, rot_expm, rot_log, sample_rotations
from nrsfm.losses import (LossConfig, canonicalization_loss_l2, equivariance_loss_l3, pseudo_huber,
                          reprojection_loss_l1, total_loss)
from nrsfm.networks import TrunkConfig, init_weights
from nrsfm.shapemodel import reconstruct

EPS = 0.01


def scalar_huber(vec, eps=EPS):
    n2 = sum(c * c for c in vec)
    return eps * (np.sqrt(1.0 + n2 / eps ** 2) - 1.0)


def test_pseudo_huber_examples():
    assert pseudo_huber([0.0, 0.0], EPS) == 0.0
    assert abs(pseudo_huber([EPS, 0.0], EPS) - (np.sqrt(2) - 1) * EPS) < 1e-15
    assert abs(pseudo_huber([0.0, 1.0], EPS) - 0.99) < 1e-4
    # tiny residuals keep full relative precision
    assert abs(pseudo_huber([1e-9, 0.0], EPS) / (0.5e-18 / EPS) - 1.0) < 1e-12
    with pytest.raises(ValueError):
        pseudo_huber([np.inf, 0.0])


def _consistent_batch(rng, B=3, K=5, D=2):
    S = rng.normal(size=(3 * D, K))
    alpha = rng.normal(size=(B, D))
    theta = rng.normal(size=(B, 3))
    Y = (rot_expm(theta) @ reconstruct(alpha, S))[:, :2]
    return Y, alpha, theta, S


def test_l1_zero_on_consistent_views(rng):
    Y, alpha, theta, S = _consistent_batch(rng)
    v = np.ones(Y.shape[::2])
    assert reprojection_loss_l1(Y, v, alpha, theta, S, EPS).item() < 1e-14


def test_l1_zero_when_nothing_visible(rng):
    Y, alpha, theta, S = _consistent_batch(rng)
    v = np.zeros((3, 5))
    assert reprojection_loss_l1(Y + 1.0, v, alpha, theta, S, EPS).item() == 0.0


def test_l1_single_keypoint_matches_scalar_oracle(rng):
    S = rng.normal(size=(3, 1))
    alpha, theta = rng.normal(size=(1, 1)), rng.normal(size=(1, 3))
    Y = rng.normal(size=(1, 2, 1))
    R = rot_expm(theta[0])
    pred = [sum(R[r, c] * alpha[0, 0] * S[c, 0] for c in range(3)) for r in range(2)]
    expected = scalar_huber([Y[0, 0, 0] - pred[0], Y[0, 1, 0] - pred[1]]) / 1
    assert abs(reprojection_loss_l1(Y, np.ones((1, 1)), alpha, theta, S, EPS).item() - expected) < 1e-15


def test_l1_divides_by_total_keypoints(rng):
    Y, alpha, theta, S = _consistent_batch(rng, B=1, K=4, D=1)
    Y = Y.copy()
    Y[0, 0, 1] += 0.3
    v = np.array([[1.0, 1.0, 0.0, 1.0]])
    assert abs(reprojection_loss_l1(Y, v, alpha, theta, S, EPS).item()
               - scalar_huber([0.3, 0.0]) / 4) < 1e-15


def test_l1_translation_estimate_removes_offsets(rng):
    Y, alpha, theta, S = _consistent_batch(rng)
    v = np.ones((3, 5))
    shifted = Y + np.array([1.0, -2.0])[None, :, None]
    assert reprojection_loss_l1(shifted, v, alpha, theta, S, EPS).item() > 0.5
    assert reprojection_loss_l1(shifted, v, alpha, theta, S, EPS, estimate_translation=True).item() < 1e-14


class _StubPsi:
    """Returns fixed coefficients regardless of input."""

    def __init__(self, alpha):
        self.alpha = alpha

    def __call__(self, X, training):
        return ad.Tensor(self.alpha)


def test_l2_zero_when_psi_recovers_coefficients(rng):
    S = rng.normal(size=(6, 4))
    alpha = rng.normal(size=(3, 2))
    X = reconstruct(alpha, S)
    R = sample_rotations(rng, 3)
    assert canonicalization_loss_l2(X, R, _StubPsi(alpha), S, EPS).item() < 1e-15


def test_l2_single_point_residual_of_size_eps():
    S = np.array([[0.0], [0.0], [0.0]])
    X = np.array([[[EPS], [0.0], [0.0]]])
    value = canonicalization_loss_l2(X, np.eye(3)[None], _StubPsi(np.zeros((1, 1))), S, EPS).item()
    assert abs(value - (np.sqrt(2) - 1) * EPS) < 1e-15


def test_l2_invariant_to_consistent_relabeling(rng):
    S = rng.normal(size=(6, 5))
    X = rng.normal(size=(2, 3, 5))
    R = sample_rotations(rng, 2)
    psi = _StubPsi(rng.normal(size=(2, 2)))
    perm = rng.permutation(5)
    a = canonicalization_loss_l2(X, R, psi, S, EPS).item()
    b = canonicalization_loss_l2(X[:, :, perm], R, psi, S[:, perm], EPS).item()
    assert abs(a - b) < 1e-15


def _small_model(seed=0, K=5, D=2):
    return init_weights(seed, K, D, TrunkConfig(num_blocks=1, outer=16, bottleneck=8))


def test_l3_with_identity_rotation_reduces_to_l1(rng):
    w = _small_model()
    Y = rng.normal(size=(4, 2, 5))
    v = np.ones((4, 5))
    r_z = np.broadcast_to(np.eye(2), (4, 2, 2))
    l3 = equivariance_loss_l3(Y, v, r_z, w.phi, w.basis, EPS, training=False).item()
    alpha, theta = w.phi(Y, v, False)
    l1 = reprojection_loss_l1(Y, v, alpha, theta, w.basis, EPS).item()
    assert l3 == l1


class _EquivariantPhi:
    """Ground-truth factorization that rotates its camera with the image."""

    def __init__(self, S, X_canon):
        self.S, self.X = S, X_canon

    def __call__(self, Y, v, training):
        Y = Y.data if isinstance(Y, ad.Tensor) else Y
        thetas = []
        for y in Y:
            # in-plane angle of the first point relative to the canonical projection
            ang = np.arctan2(y[1, 0], y[0, 0]) - np.arctan2(self.X[1, 0], self.X[0, 0])
            thetas.append(rot_log(inplane_rotation(ang)[1]))
        return ad.Tensor(np.ones((len(Y), 1))), ad.Tensor(np.array(thetas))


def test_l3_zero_for_equivariant_phi(rng):
    X = rng.normal(size=(3, 4))
    X[2] = 0.0  # planar structure viewed frontally: image rotation is a camera roll
    phi = _EquivariantPhi(X, X)
    Y = np.stack([X[:2]] * 3)
    r_z = inplane_rotation(rng.uniform(0, 2 * np.pi, 3))[0]
    value = equivariance_loss_l3(Y, np.ones((3, 4)), r_z, phi, X, EPS).item()
    assert value < 1e-13


def test_l3_constant_phi_hand_computation():
    S = np.array([[1.0, -1.0], [0.0, 0.0], [0.0, 0.0]])

    def phi(Y, v, training):
        return ad.Tensor([[0.5]]), ad.Tensor([[0.0, 0.0, 0.0]])

    Y = np.array([[[1.0, -1.0], [0.0, 0.0]]])
    r_z = inplane_rotation(np.pi / 2)[0][None]
    # rotated input is ((0, 1), (0, -1)); the prediction stays at (+-0.5, 0)
    expected = (scalar_huber([-0.5, 1.0]) + scalar_huber([0.5, -1.0])) / 2
    value = equivariance_loss_l3(Y, np.ones((1, 2)), r_z, phi, S, EPS).item()
    assert abs(value - expected) < 1e-15


def test_total_loss_variants(rng):
    w = _small_model(1)
    Y = rng.normal(size=(4, 2, 5))
    v = np.ones((4, 5))
    base, parts = total_loss(Y, v, w, LossConfig(variant="base"), np.random.default_rng(0), False)
    alpha, theta = w.phi(Y, v, False)
    l1 = reprojection_loss_l1(Y, v, alpha, theta, w.basis, EPS, reduce=False)
    assert base.item() == pytest.approx(l1.data.mean(), rel=1e-14)
    full, parts = total_loss(Y, v, w, LossConfig(variant="full"), np.random.default_rng(0), False)
    assert set(parts) == {"l2", "l3", "total"}
    assert full.item() == pytest.approx(parts["l3"] + parts["l2"], rel=1e-14)
    with pytest.raises(ValueError):
        LossConfig(variant="nope")


def test_total_loss_full_matches_scripted_recomputation(rng):
    w = _small_model(2)
    Y = rng.normal(size=(4, 2, 5))
    v = (rng.random((4, 5)) > 0.2).astype(float)
    v[:, 0] = 1.0
    cfg = LossConfig(variant="full", weights={"l1": 1.0, "l2": 0.5, "l3": 2.0})
    value, _ = total_loss(Y, v, w, cfg, np.random.default_rng(9), training=False)

    draws = np.random.default_rng(9)
    angles = draws.uniform(0.0, 2.0 * np.pi, size=4)
    q = draws.standard_normal((4, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    expected_l3 = expected_l2 = 0.0
    alpha, _ = w.phi(Y, v, False)
    for n in range(4):
        c, s = np.cos(angles[n]), np.sin(angles[n])
        Yr = np.array([[c, -s], [s, c]]) @ Y[n]
        _, theta_r = w.phi(Yr[None], v[n][None], False)
        X = reconstruct(alpha.data[n], w.basis.data)
        proj = (rot_expm(theta_r.data[0]) @ X)[:2]
        expected_l3 += sum(v[n, k] * scalar_huber(Yr[:, k] - proj[:, k]) for k in range(5)) / 5
        qw, qx, qy, qz = q[n]
        Rn = np.array([
            [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qw * qz), 2 * (qx * qz + qw * qy)],
            [2 * (qx * qy + qw * qz), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qw * qx)],
            [2 * (qx * qz - qw * qy), 2 * (qy * qz + qw * qx), 1 - 2 * (qx * qx + qy * qy)]])
        a_hat = w.psi((Rn @ X)[None], False).data[0]
        X_hat = reconstruct(a_hat, w.basis.data)
        expected_l2 += sum(scalar_huber(X[:, k] - X_hat[:, k]) for k in range(5)) / 5
    expected = 2.0 * expected_l3 / 4 + 0.5 * expected_l2 / 4
    assert value.item() == pytest.approx(expected, rel=1e-12)
