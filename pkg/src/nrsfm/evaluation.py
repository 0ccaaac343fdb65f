"""Reconstruction metrics and the dataset-level evaluation protocol."""

import math
from dataclasses import dataclass

import numpy as np

from .geometry import rot_expm
from .networks import phi_forward
from .shapemodel import reconstruct
from .training import estimate_translation, normalize

__all__ = [
    "EvalProtocol", "mpjpe", "stress", "flip_z", "resolve_depth_flip", "Reconstructor",
    "evaluate", "canonical_dispersion", "ablation_table",
]


@dataclass
class EvalProtocol:
    depth_centering: str = "mean_depth"
    allow_depth_flip: bool = True

    def __post_init__(self):
        if self.depth_centering not in ("mean_depth", "root_joint"):
            raise ValueError(f"unknown depth centering {self.depth_centering!r}")


def mpjpe(X_pred, X_gt):
    """Mean Euclidean distance between corresponding 3D points."""
    X_pred = np.asarray(X_pred, dtype=np.float64)
    X_gt = np.asarray(X_gt, dtype=np.float64)
    if X_pred.shape != X_gt.shape:
        raise ValueError(f"point count mismatch: {X_pred.shape} vs {X_gt.shape}")
    return float(np.linalg.norm(X_pred - X_gt, axis=0).mean())


def _pair_distances(X):
    diff = X[:, :, None] - X[:, None, :]
    return np.sqrt((diff * diff).sum(axis=0))


def stress(X_pred, X_gt):
    """Sum over point pairs i<j of the absolute distance discrepancy, over K(K-1)."""
    X_pred = np.asarray(X_pred, dtype=np.float64)
    X_gt = np.asarray(X_gt, dtype=np.float64)
    if X_pred.shape != X_gt.shape:
        raise ValueError(f"point count mismatch: {X_pred.shape} vs {X_gt.shape}")
    K = X_pred.shape[1]
    if K < 2:
        raise ValueError("stress needs at least two points")
    iu = np.triu_indices(K, 1)
    gap = np.abs(_pair_distances(X_pred)[iu] - _pair_distances(X_gt)[iu])
    return float(gap.sum() / (K * (K - 1)))


def flip_z(X):
    X = np.array(X, dtype=np.float64)
    X[2] = -X[2]
    return X


def resolve_depth_flip(X_pred, X_gt, metric=mpjpe):
    """Best of ``metric`` on the prediction and its depth mirror; ties keep the original."""
    plain = metric(X_pred, X_gt)
    flipped = metric(flip_z(X_pred), X_gt)
    if flipped < plain:
        return flipped, True
    return plain, False


def _center_depth(X, protocol, root_index):
    X = np.array(X, dtype=np.float64)
    if protocol.depth_centering == "root_joint":
        if root_index is None:
            raise ValueError("root_joint centering needs a root keypoint index")
        return X - X[:, root_index:root_index + 1]
    X[2] -= X[2].mean()
    return X


class Reconstructor:
    """Runs a trained factorization network on raw (unnormalized) views."""

    def __init__(self, weights, stats, estimate_translation=False, chunk=2048):
        self.weights = weights
        self.stats = stats
        self.translate = estimate_translation
        self.chunk = chunk

    def reconstruct_views(self, Y, v):
        """Per-view pose, canonical and camera-frame structures in input units.

        Camera-frame points are placed so that their projection lines up with
        the input keypoints (visible centroid plus the estimated translation).
        """
        Y = np.asarray(Y, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        s = self.stats.scale
        Yn = normalize(Y, v, self.stats)
        alphas, thetas = [], []
        for start in range(0, len(Y), self.chunk):
            a, t = phi_forward((Yn[start:start + self.chunk], v[start:start + self.chunk]),
                               self.weights)
            alphas.append(a.data)
            thetas.append(t.data)
        alpha = np.concatenate(alphas)
        theta = np.concatenate(thetas)
        canonical = reconstruct(alpha, self.weights.basis.data)
        X_cam = rot_expm(theta) @ canonical
        reproj = X_cam[:, :2, :]
        shift = estimate_translation(Yn, v, reproj) if self.translate else np.zeros((len(Y), 2))
        residual = (Yn - reproj - shift[..., None]) * v[:, None, :]
        rmse = np.sqrt((residual ** 2).sum(axis=(1, 2)) / v.sum(axis=1)) / s
        count = v.sum(axis=1)
        centroid = (Y * v[:, None, :]).sum(axis=2) / count[:, None]
        X_cam = X_cam / s
        X_cam[:, :2, :] += (shift / s + centroid)[..., None]
        return {"alpha": alpha, "theta": theta, "canonical": canonical / s,
                "camera": X_cam, "reprojection_rmse": rmse}


def evaluate(model, dataset, protocol=None):
    """Per-view and mean MPJPE, stress and reprojection RMSE.

    ``model`` is anything with ``reconstruct_views(Y, v)`` returning a dict
    with ``camera`` structures and ``reprojection_rmse``.
    """
    protocol = protocol or EvalProtocol()
    if dataset.gt is None or dataset.gt.get("structures") is None:
        raise ValueError("evaluation needs ground-truth structures")
    out = model.reconstruct_views(dataset.Y, dataset.v)
    records = []
    for i in range(len(dataset)):
        mask = dataset.active_mask(i)
        pred = _center_depth(out["camera"][i][:, mask], protocol, dataset.root_index)
        gt = _center_depth(dataset.gt["structures"][i][:, mask], protocol, dataset.root_index)
        if protocol.allow_depth_flip:
            err, flipped = resolve_depth_flip(pred, gt, mpjpe)
        else:
            err, flipped = mpjpe(pred, gt), False
        records.append({
            "index": i, "mpjpe": err, "stress": stress(pred, gt),
            "reprojection_rmse": float(out["reprojection_rmse"][i]), "flipped": bool(flipped),
        })
    n = len(records)
    summary = {key: math.fsum(r[key] for r in records) / n
               for key in ("mpjpe", "stress", "reprojection_rmse")}
    summary["flip_rate"] = math.fsum(r["flipped"] for r in records) / n
    summary["views"] = n
    return {"protocol": {"depth_centering": protocol.depth_centering,
                         "allow_depth_flip": protocol.allow_depth_flip},
            "summary": summary, "views": records}


def canonical_dispersion(canonical, groups):
    """Mean per-point spread of canonical shapes predicted for the same object.

    For each group of views the spread of a keypoint is the RMS distance of
    its predictions to their mean; the result averages over points and groups.
    """
    groups = np.asarray(groups)
    values = []
    for g in np.unique(groups):
        X = canonical[groups == g]
        if len(X) < 2:
            continue
        dev = X - X.mean(axis=0, keepdims=True)
        values.append(np.sqrt((dev ** 2).sum(axis=1).mean(axis=0)).mean())
    return float(np.mean(values))


def ablation_table(reports):
    """Plain-text table of summary metrics, one row per labelled report."""
    lines = [f"{'method':<14}{'MPJPE':>10}{'stress':>10}{'reproj':>10}{'flip':>8}"]
    for label, rep in reports:
        s = rep["summary"]
        lines.append(f"{label:<14}{s['mpjpe']:>10.4f}{s['stress']:>10.4f}"
                     f"{s['reprojection_rmse']:>10.4f}{s['flip_rate']:>8.2f}")
    return "\n".join(lines)
