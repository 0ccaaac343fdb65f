"""Fully connected residual networks for factorization and canonicalization.

The factorization network maps a (normalized) view ``(Y, v)`` to shape
coefficients ``alpha`` and axis-angle viewpoint ``theta``. The
canonicalization network maps an arbitrarily rotated structure back to shape
coefficients of the shared basis.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .shapemodel import KeypointView, PoseEstimate, reconstruct

__all__ = [
    "TrunkConfig", "Linear", "BatchNorm", "ResidualBlock", "ResidualTrunk",
    "FactorizationNet", "CanonicalizationNet", "ModelWeights", "init_weights",
    "phi_forward", "psi_forward",
]


@dataclass
class TrunkConfig:
    num_blocks: int = 6
    outer: int = 1024
    bottleneck: int = 256
    batch_norm: bool = True
    norm_momentum: float = 0.1
    norm_eps: float = 1e-5
    head_scale: float = 0.01

    def __post_init__(self):
        if self.num_blocks < 1 or self.outer < 1 or self.bottleneck < 1:
            raise ValueError("trunk needs at least one block and positive widths")


class Module:
    """Attribute-order traversal of parameters and buffers."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, ad.Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def named_buffers(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, np.ndarray):
                yield prefix + key, (self, key)
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]


class Linear(Module):
    def __init__(self, rng, fan_in, fan_out, scale=1.0):
        std = scale * np.sqrt(2.0 / fan_in)
        self.W = ad.Tensor(rng.normal(0.0, std, (fan_in, fan_out)), requires_grad=True)
        self.b = ad.Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x):
        return x @ self.W + self.b


class BatchNorm(Module):
    def __init__(self, width, momentum=0.1, eps=1e-5):
        self.gamma = ad.Tensor(np.ones(width), requires_grad=True)
        self.beta = ad.Tensor(np.zeros(width), requires_grad=True)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, training):
        if not training:
            return ad.affine_norm(x, self.gamma, self.beta, self.running_mean,
                                  self.running_var, self.eps)
        y, mu, var = ad.batchnorm(x, self.gamma, self.beta, self.eps)
        n = x.shape[0]
        unbiased = var * n / (n - 1) if n > 1 else var
        m = self.momentum
        self.running_mean[:] = (1 - m) * self.running_mean + m * mu
        self.running_var[:] = (1 - m) * self.running_var + m * unbiased
        return y


class _NoNorm(Module):
    def __call__(self, x, training):
        return x


def _norm(cfg, width):
    if cfg.batch_norm:
        return BatchNorm(width, cfg.norm_momentum, cfg.norm_eps)
    return _NoNorm()


class ResidualBlock(Module):
    """outer -> outer -> bottleneck -> outer, added back onto the input."""

    def __init__(self, rng, cfg):
        self.fc1 = Linear(rng, cfg.outer, cfg.outer)
        self.norm1 = _norm(cfg, cfg.outer)
        self.fc2 = Linear(rng, cfg.outer, cfg.bottleneck)
        self.norm2 = _norm(cfg, cfg.bottleneck)
        self.fc3 = Linear(rng, cfg.bottleneck, cfg.outer)

    def __call__(self, x, training):
        h = ad.relu(self.norm1(self.fc1(x), training))
        h = ad.relu(self.norm2(self.fc2(h), training))
        return x + self.fc3(h)


class ResidualTrunk(Module):
    def __init__(self, rng, in_dim, cfg):
        self.stem = Linear(rng, in_dim, cfg.outer)
        self.stem_norm = _norm(cfg, cfg.outer)
        self.blocks = [ResidualBlock(rng, cfg) for _ in range(cfg.num_blocks)]

    def embed(self, x, training):
        return ad.relu(self.stem_norm(self.stem(x), training))

    def run_blocks(self, h, training):
        for block in self.blocks:
            h = block(h, training)
        return h

    def __call__(self, x, training):
        return self.run_blocks(self.embed(x, training), training)


class FactorizationNet(Module):
    """(Y, v) -> (alpha, theta); inputs are (B, 2, K) keypoints and (B, K) flags."""

    def __init__(self, rng, K, D, cfg):
        self.trunk = ResidualTrunk(rng, 3 * K, cfg)
        self.head_alpha = Linear(rng, cfg.outer, D)
        self.head_theta = Linear(rng, cfg.outer, 3, scale=cfg.head_scale)

    def __call__(self, Y, v, training=False):
        Y, v = ad.as_tensor(Y), ad.as_tensor(v)
        B = Y.shape[0]
        x = ad.concat([Y.reshape((B, -1)), v], axis=1)
        h = self.trunk(x, training)
        return self.head_alpha(h), self.head_theta(h)


class CanonicalizationNet(Module):
    """Rotated structure (B, 3, K) -> shape coefficients (B, D)."""

    def __init__(self, rng, K, D, cfg):
        self.trunk = ResidualTrunk(rng, 3 * K, cfg)
        self.head_alpha = Linear(rng, cfg.outer, D)

    def __call__(self, X, training=False):
        X = ad.as_tensor(X)
        h = self.trunk(X.reshape((X.shape[0], -1)), training)
        return self.head_alpha(h)


class ModelWeights(Module):
    """Both networks plus the shared trainable shape basis."""

    def __init__(self, K, D, trunk, seed):
        self.K, self.D, self.trunk, self.seed = K, D, trunk, seed
        rng = np.random.default_rng(seed)
        self.phi = FactorizationNet(rng, K, D, trunk)
        self.psi = CanonicalizationNet(rng, K, D, trunk)
        self.basis = ad.Tensor(rng.normal(0.0, 0.01, (3 * D, K)), requires_grad=True)

    def dims(self):
        return {"K": self.K, "D": self.D, "trunk": asdict(self.trunk), "seed": self.seed}

    def state_dict(self):
        """Copies of every parameter and buffer, keyed by dotted name."""
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, (owner, key) in self.named_buffers():
            state[name] = getattr(owner, key).copy()
        return state

    def load_state_dict(self, state):
        expected = set(state)
        for name, p in self.named_parameters():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
            expected.discard(name)
        for name, (owner, key) in self.named_buffers():
            getattr(owner, key)[:] = state[name]
            expected.discard(name)
        if expected:
            raise ValueError(f"unexpected entries in state: {sorted(expected)}")


def init_weights(seed, K, D, trunk=None):
    """Seeded initialization: He-scaled Gaussian layers, zero biases.

    The viewpoint head is further scaled by ``trunk.head_scale`` so a fresh
    model predicts ``theta`` close to zero (cameras near identity).
    """
    if K < 1 or D < 1:
        raise ValueError("K and D must be positive")
    return ModelWeights(K, D, trunk or TrunkConfig(), seed)


def phi_forward(view, weights, training=False):
    """Run the factorization network on one normalized view."""
    if isinstance(view, KeypointView):
        Y, v = view.Y[None], view.v[None]
    else:
        Y, v = view
    alpha, theta = weights.phi(Y, v, training)
    if isinstance(view, KeypointView):
        return PoseEstimate(alpha.data[0].copy(), theta.data[0].copy())
    return alpha, theta


def psi_forward(X_rot, weights, training=False):
    """Shape coefficients predicted by the canonicalization network."""
    single = not isinstance(X_rot, ad.Tensor) and np.ndim(X_rot) == 2
    X = np.asarray(X_rot)[None] if single else X_rot
    alpha = weights.psi(X, training)
    return alpha.data[0].copy() if single else alpha


def canonical_structure(alpha, weights):
    return reconstruct(alpha, weights.basis.data)
