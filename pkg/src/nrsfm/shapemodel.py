"""Linear low-rank shape model, camera views and multiclass keypoint layout."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import rot_expm

__all__ = [
    "KeypointView", "PoseEstimate", "ShapeBasis", "MulticlassLayout",
    "reconstruct", "camera_view", "pad_multiclass", "extract_class",
]


@dataclass
class KeypointView:
    """One observation: 2xK keypoints and a K-vector of visibility flags."""

    Y: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.Y.ndim != 2 or self.Y.shape[0] != 2 or self.v.shape != (self.Y.shape[1],):
            raise ValueError(f"inconsistent view shapes Y {self.Y.shape}, v {self.v.shape}")

    @property
    def K(self):
        return self.Y.shape[1]


@dataclass
class PoseEstimate:
    alpha: np.ndarray
    theta: np.ndarray


@dataclass
class ShapeBasis:
    """D stacked 3xK basis shapes, stored as a (3D, K) matrix."""

    S: np.ndarray

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=np.float64)
        if self.S.ndim != 2 or self.S.shape[0] % 3:
            raise ValueError(f"basis must have 3D rows, got shape {self.S.shape}")

    @property
    def D(self):
        return self.S.shape[0] // 3

    @property
    def K(self):
        return self.S.shape[1]

    def blocks(self):
        return self.S.reshape(self.D, 3, self.K)


def reconstruct(alpha, S):
    """Structure ``(alpha kron I3) S``: the alpha-weighted sum of basis blocks.

    ``alpha`` may be a single D-vector or a (B, D) batch; tensors in either
    argument produce a differentiable result.
    """
    if isinstance(S, ShapeBasis):
        S = S.S
    rows, K = S.shape
    D = rows // 3
    if rows % 3 or alpha.shape[-1] != D:
        raise ValueError(f"alpha of length {alpha.shape[-1]} does not match basis with {rows} rows")
    if isinstance(alpha, ad.Tensor) or isinstance(S, ad.Tensor):
        alpha, S = ad.as_tensor(alpha), ad.as_tensor(S)
        batch = alpha.shape[:-1]
        a2 = alpha.reshape((-1, D))
        X = a2 @ S.reshape((D, 3 * K))
        return X.reshape(batch + (3, K))
    alpha = np.asarray(alpha, dtype=np.float64)
    return (alpha.reshape(-1, D) @ S.reshape(D, 3 * K)).reshape(alpha.shape[:-1] + (3, K))


def camera_view(theta):
    """2x3 orthographic view matrix: the top two rows of ``rot_expm(theta)``."""
    R = rot_expm(theta)
    return R[..., :2, :]


@dataclass
class MulticlassLayout:
    """Concatenated keypoint layout with one block per object class."""

    counts: tuple
    offsets: tuple = field(init=False)

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        if not self.counts or min(self.counts) < 1:
            raise ValueError("every class needs at least one keypoint")
        self.offsets = tuple(int(o) for o in np.concatenate([[0], np.cumsum(self.counts)[:-1]]))

    @property
    def class_count(self):
        return len(self.counts)

    @property
    def K(self):
        return sum(self.counts)

    def block(self, class_id):
        if not 0 <= class_id < self.class_count:
            raise ValueError(f"class id {class_id} out of range [0, {self.class_count})")
        start = self.offsets[class_id]
        return slice(start, start + self.counts[class_id])

    def mask(self, class_id):
        m = np.zeros(self.K, dtype=bool)
        m[self.block(class_id)] = True
        return m


def pad_multiclass(Y_c, v_c, class_id, layout):
    """Place one class's keypoints into its block of the full layout."""
    Y_c = np.asarray(Y_c, dtype=np.float64)
    v_c = np.asarray(v_c, dtype=np.float64)
    block = layout.block(class_id)
    if Y_c.shape != (2, layout.counts[class_id]) or v_c.shape != (layout.counts[class_id],):
        raise ValueError(f"class {class_id} expects {layout.counts[class_id]} keypoints, "
                         f"got Y {Y_c.shape}, v {v_c.shape}")
    Y = np.zeros((2, layout.K))
    v = np.zeros(layout.K)
    Y[:, block] = Y_c * v_c
    v[block] = v_c
    return KeypointView(Y, v)


def extract_class(view, class_id, layout):
    block = layout.block(class_id)
    return view.Y[:, block].copy(), view.v[block].copy()
