"""Synthetic non-rigid benchmarks rendered under orthographic projection.

Shapes come from a random low-rank basis whose components shrink
geometrically, so the first block acts as a mean shape. Each view gets a
Haar-random rotation, iid Gaussian pixel noise on visible points and iid
Bernoulli occlusion.

Every random quantity has its own stream keyed by ``(seed, stream, index)``:
views are order-independent, and changing the corruption settings leaves
shapes and viewpoints untouched.
"""

from dataclasses import asdict, dataclass, replace

import numpy as np

from .geometry import center_structure, project, rotation_angle, sample_rotation
from .shapemodel import KeypointView, MulticlassLayout, pad_multiclass

__all__ = [
    "SynthConfig", "KeypointDataset", "generate", "generate_rigid",
    "generate_multiclass", "sweep_grid", "SweepCell",
]

_BASIS, _ALPHA, _ROTATION, _NOISE, _OCCLUSION, _SPLIT = range(6)


def _view_rotation(rng, max_angle):
    R = sample_rotation(rng)
    while max_angle is not None and rotation_angle(R) > max_angle:
        R = sample_rotation(rng)
    return R


@dataclass
class SynthConfig:
    K: int = 30
    D_true: int = 6
    num_shapes: int = 100
    views_per_shape: int = 30
    alpha_std: float = 1.0
    alpha_std_first: float = 0.1
    basis_decay: float = 0.5
    noise_sigma: float = 0.0
    occlusion_prob: float = 0.0
    test_fraction: float = 0.2
    seed: int = 0
    # None: Haar rotations over all of SO(3); otherwise Haar restricted to angles <= this
    max_view_angle: float | None = None

    def __post_init__(self):
        if self.K < 3 + self.D_true / 2:
            raise ValueError(f"K={self.K} keypoints cannot determine a rank-{self.D_true} "
                             f"basis; need K >= 3 + D/2")
        if self.D_true < 1 or self.num_shapes < 1 or self.views_per_shape < 1:
            raise ValueError("D_true, num_shapes and views_per_shape must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 <= self.occlusion_prob < 1:
            raise ValueError("occlusion_prob must lie in [0, 1)")
        if not 0 <= self.test_fraction < 1:
            raise ValueError("test_fraction must lie in [0, 1)")
        if self.max_view_angle is not None and not 0 < self.max_view_angle <= np.pi:
            raise ValueError("max_view_angle must lie in (0, pi]")


class KeypointDataset:
    """A set of 2D views with optional ground truth.

    Arrays are stacked over views: ``Y`` (N, 2, K), ``v`` (N, K). Ground truth,
    when present, holds camera-frame ``structures`` (N, 3, K), ``rotations``
    (N, 3, 3), ``alphas`` (N, D), ``basis`` (3D, K) and ``shape_index`` (N,).
    """

    def __init__(self, Y, v, split=None, gt=None, config=None, has_occlusions=None,
                 layout=None, class_ids=None, root_index=None):
        self.Y = np.asarray(Y, dtype=np.float64)
        self.v = np.asarray(v, dtype=np.float64)
        if self.Y.ndim != 3 or self.Y.shape[1] != 2 or self.v.shape != (self.Y.shape[0], self.Y.shape[2]):
            raise ValueError(f"inconsistent shapes Y {self.Y.shape}, v {self.v.shape}")
        n = len(self.Y)
        self.split = np.asarray(split if split is not None else ["train"] * n, dtype=str)
        if self.split.shape != (n,):
            raise ValueError("split labels must have one entry per view")
        self.gt = gt
        self.config = config or {}
        if has_occlusions is None:
            has_occlusions = bool((self.v < 1).any())
        self.has_occlusions = bool(has_occlusions)
        self.layout = layout
        self.class_ids = None if class_ids is None else np.asarray(class_ids, dtype=int)
        self.root_index = root_index

    def __len__(self):
        return len(self.Y)

    @property
    def K(self):
        return self.Y.shape[2]

    def view(self, i):
        return KeypointView(self.Y[i], self.v[i])

    def subset(self, index):
        index = np.asarray(index)
        gt = None if self.gt is None else {
            k: (val if k == "basis" or val is None else val[index]) for k, val in self.gt.items()}
        return KeypointDataset(
            self.Y[index], self.v[index], self.split[index], gt, self.config,
            self.has_occlusions, self.layout,
            None if self.class_ids is None else self.class_ids[index], self.root_index)

    def train(self):
        return self.subset(np.flatnonzero(self.split == "train"))

    def test(self):
        return self.subset(np.flatnonzero(self.split == "test"))

    def active_mask(self, i):
        """Keypoints that belong to view ``i``'s object (all of them unless multiclass)."""
        if self.layout is None or self.class_ids is None:
            return np.ones(self.K, dtype=bool)
        return self.layout.mask(int(self.class_ids[i]))


def _stream(seed, kind, index=0):
    return np.random.default_rng([seed, kind, index])


def _basis(cfg, K, seed_offset=0):
    rng = _stream(cfg.seed, _BASIS, seed_offset)
    scales = cfg.basis_decay ** np.arange(cfg.D_true)
    blocks = rng.standard_normal((cfg.D_true, 3, K)) * scales[:, None, None]
    return center_structure(blocks).reshape(3 * cfg.D_true, K)


def _alpha(cfg, shape_id, rigid):
    if rigid:
        return np.ones(1)
    rng = _stream(cfg.seed, _ALPHA, shape_id)
    std = np.full(cfg.D_true, cfg.alpha_std)
    std[0] = cfg.alpha_std_first
    mean = np.zeros(cfg.D_true)
    mean[0] = 1.0
    return mean + std * rng.standard_normal(cfg.D_true)


def _render(cfg, X, view_id, K):
    R = _view_rotation(_stream(cfg.seed, _ROTATION, view_id), cfg.max_view_angle)
    X_cam = R @ X
    Y = project(X_cam)
    if cfg.noise_sigma > 0:
        Y = Y + cfg.noise_sigma * _stream(cfg.seed, _NOISE, view_id).standard_normal(Y.shape)
    v = np.ones(K)
    if cfg.occlusion_prob > 0:
        rng = _stream(cfg.seed, _OCCLUSION, view_id)
        v = (rng.random(K) >= cfg.occlusion_prob).astype(np.float64)
        while not v.any():
            v = (rng.random(K) >= cfg.occlusion_prob).astype(np.float64)
    return Y * v, v, X_cam, R


def _split(cfg, num_shapes):
    order = _stream(cfg.seed, _SPLIT).permutation(num_shapes)
    n_test = int(round(cfg.test_fraction * num_shapes))
    labels = np.array(["train"] * num_shapes, dtype=object)
    labels[order[:n_test]] = "test"
    return labels


def generate(config, rigid=False):
    """Render ``num_shapes * views_per_shape`` views with full ground truth."""
    cfg = config
    if rigid and cfg.D_true != 1:
        cfg = replace(cfg, D_true=1)
    K = cfg.K
    S = _basis(cfg, K)
    D = cfg.D_true
    shape_labels = _split(cfg, cfg.num_shapes)
    Ys, vs, Xs, Rs, alphas, shape_idx, split = [], [], [], [], [], [], []
    for shape_id in range(cfg.num_shapes):
        alpha = _alpha(cfg, shape_id, rigid)
        X = (alpha @ S.reshape(D, 3 * K)).reshape(3, K)
        for j in range(cfg.views_per_shape):
            view_id = shape_id * cfg.views_per_shape + j
            Y, v, X_cam, R = _render(cfg, X, view_id, K)
            Ys.append(Y)
            vs.append(v)
            Xs.append(X_cam)
            Rs.append(R)
            alphas.append(alpha)
            shape_idx.append(shape_id)
            split.append(shape_labels[shape_id])
    gt = {
        "structures": np.array(Xs), "rotations": np.array(Rs), "alphas": np.array(alphas),
        "basis": S, "shape_index": np.array(shape_idx),
    }
    echo = asdict(cfg)
    echo["rigid"] = bool(rigid)
    return KeypointDataset(np.array(Ys), np.array(vs), np.array(split, dtype=str), gt, echo,
                           has_occlusions=cfg.occlusion_prob > 0)


def generate_rigid(config):
    """Views of one fixed structure (rank-1 basis, unit coefficient)."""
    return generate(replace(config, D_true=1, num_shapes=1), rigid=True)


def generate_multiclass(config, class_counts):
    """Classes with disjoint bases, padded into one concatenated keypoint layout."""
    layout = MulticlassLayout(class_counts)
    Ys, vs, Xs, Rs, split, class_ids, shape_idx = [], [], [], [], [], [], []
    for c, K_c in enumerate(layout.counts):
        cfg_c = replace(config, K=K_c, seed=config.seed * 1000 + c)
        data = generate(cfg_c)
        block = layout.block(c)
        for i in range(len(data)):
            view = pad_multiclass(data.Y[i], data.v[i], c, layout)
            X = np.zeros((3, layout.K))
            X[:, block] = data.gt["structures"][i]
            Ys.append(view.Y)
            vs.append(view.v)
            Xs.append(X)
            Rs.append(data.gt["rotations"][i])
            split.append(data.split[i])
            class_ids.append(c)
            shape_idx.append(c * config.num_shapes + data.gt["shape_index"][i])
    gt = {"structures": np.array(Xs), "rotations": np.array(Rs), "alphas": None,
          "basis": None, "shape_index": np.array(shape_idx)}
    echo = asdict(config)
    echo["class_counts"] = list(layout.counts)
    return KeypointDataset(np.array(Ys), np.array(vs), np.array(split, dtype=str), gt, echo,
                           has_occlusions=True, layout=layout, class_ids=np.array(class_ids))


@dataclass
class SweepCell:
    sigma: float
    p_occ: float
    config: SynthConfig

    def generate(self):
        return generate(self.config)


def sweep_grid(base, sigmas, p_occs):
    """One config per (sigma, p_occ) cell; shapes and viewpoints are shared."""
    if not len(sigmas) or not len(p_occs):
        raise ValueError("sweep grids must be non-empty")
    return [SweepCell(float(s), float(p), replace(base, noise_sigma=float(s), occlusion_prob=float(p)))
            for s in sigmas for p in p_occs]
