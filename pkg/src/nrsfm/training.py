"""Input normalization, SGD with momentum, plateau decay and the fit loop."""

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import center_view
from .losses import LossConfig, total_loss
from .networks import TrunkConfig, init_weights

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig", "NormalizationStats", "DivergenceError", "compute_scale", "normalize",
    "estimate_translation", "sgd_momentum_step", "PlateauScheduler", "plateau_schedule",
    "Trainer", "fit",
]


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr: float = 0.001
    momentum: float = 0.9
    plateau_patience: int = 5
    plateau_threshold: float = 1e-3
    lr_decay_factor: float = 10.0
    min_lr: float = 1e-6
    max_epochs: int = 100
    seed: int = 0
    variant: str = "full"
    D: int = 10
    trunk: TrunkConfig = field(default_factory=TrunkConfig)
    epsilon: float = 0.01
    loss_weights: dict = field(default_factory=lambda: {"l1": 1.0, "l2": 1.0, "l3": 1.0})
    detach_psi_input: bool = False
    # None: follow the dataset's has_occlusions flag
    estimate_translation: bool | None = None

    def __post_init__(self):
        if isinstance(self.trunk, dict):
            self.trunk = TrunkConfig(**self.trunk)
        if self.batch_size < 1 or not self.lr > 0 or not self.lr_decay_factor > 1:
            raise ValueError("need batch_size >= 1, lr > 0 and lr_decay_factor > 1")
        LossConfig(self.epsilon, self.variant, dict(self.loss_weights))

    def loss_config(self, has_occlusions):
        translate = has_occlusions if self.estimate_translation is None else self.estimate_translation
        return LossConfig(self.epsilon, self.variant, dict(self.loss_weights),
                          self.detach_psi_input, bool(translate))


@dataclass
class NormalizationStats:
    """Global scale applied to centered keypoints."""

    scale: float
    axis: tuple = (1.0, 0.0)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("normalization scale must be positive")


def compute_scale(Y, v):
    """Scale so the mean half-extent along the dominant axis becomes one.

    The axis is the leading principal direction of all centered visible
    keypoints in the set; each view's half-extent is half its range of
    projections onto that axis.
    """
    Y = np.asarray(Y, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if Y.ndim == 2:
        Y, v = Y[None], v[None]
    if len(Y) == 0:
        raise ValueError("cannot compute a scale from an empty dataset")
    Yc = center_view(Y, v)
    pts = Yc.transpose(0, 2, 1)[v > 0]
    _, vecs = np.linalg.eigh(pts.T @ pts)
    axis = vecs[:, -1]
    if axis[np.argmax(np.abs(axis))] < 0:
        axis = -axis
    proj = np.einsum("i,nik->nk", axis, Yc)
    big = np.where(v > 0, proj, -np.inf).max(axis=1)
    small = np.where(v > 0, proj, np.inf).min(axis=1)
    half = 0.5 * (big - small).mean()
    if not half > 0:
        raise ValueError("keypoints have no spatial extent")
    return NormalizationStats(float(1.0 / half), tuple(float(a) for a in axis))


def normalize(Y, v, stats):
    """Center on the visible keypoints and multiply by the global scale."""
    scale = stats.scale if isinstance(stats, NormalizationStats) else float(stats)
    return center_view(Y, v) * scale


def estimate_translation(Y, v, reprojected):
    """Offset between the visible centroids of ``Y`` and of ``reprojected``."""
    Y = np.asarray(Y, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    count = v.sum(axis=-1)
    if np.any(count <= 0):
        raise ValueError("translation estimate needs at least one visible keypoint")
    mean_y = (Y * v[..., None, :]).sum(axis=-1) / count[..., None]
    mean_r = (np.asarray(reprojected) * v[..., None, :]).sum(axis=-1) / count[..., None]
    return mean_y - mean_r


def sgd_momentum_step(weights, grads, velocity, lr, momentum):
    """``v <- momentum * v + g``; ``w <- w - lr * v``. Returns new lists."""
    new_w, new_v = [], []
    for w, g, vel in zip(weights, grads, velocity, strict=True):
        if w.shape != g.shape or vel.shape != g.shape:
            raise ad.ShapeError(f"parameter {w.shape}, gradient {g.shape}, velocity {vel.shape}")
        if not np.isfinite(g).all():
            raise ad.NonFiniteError("non-finite gradient; step aborted")
        vel = momentum * vel + g
        new_v.append(vel)
        new_w.append(w - lr * vel)
    return new_w, new_v


class PlateauScheduler:
    """Divide the rate by ``factor`` after ``patience`` epochs without progress.

    Progress means the objective beat the best value so far by a relative
    ``threshold``. The counter restarts after each decay.
    """

    def __init__(self, lr, factor=10.0, patience=5, threshold=1e-3, min_lr=1e-6):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = np.inf
        self.bad_epochs = 0
        self.decays = []

    def step(self, objective, epoch=None):
        improved = not np.isfinite(self.best) or objective < self.best * (1.0 - self.threshold)
        if improved:
            self.best = objective
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr /= self.factor
                self.bad_epochs = 0
                self.decays.append(epoch)
        return self.lr

    @property
    def finished(self):
        return self.lr < self.min_lr

    def state_dict(self):
        return {"lr": self.lr, "best": None if not np.isfinite(self.best) else self.best,
                "bad_epochs": self.bad_epochs, "decays": list(self.decays)}

    def load_state_dict(self, state):
        self.lr = state["lr"]
        self.best = np.inf if state["best"] is None else state["best"]
        self.bad_epochs = state["bad_epochs"]
        self.decays = list(state["decays"])


def plateau_schedule(history, lr, factor=10.0, patience=5, threshold=1e-3):
    """Learning rate after replaying a history of epoch objectives."""
    sched = PlateauScheduler(lr, factor, patience, threshold)
    for epoch, obj in enumerate(history):
        sched.step(obj, epoch)
    return sched.lr


class Trainer:
    """Owns the model, optimizer state and rng for one training run."""

    def __init__(self, cfg, K, stats, has_occlusions, weights=None):
        self.cfg = cfg
        self.stats = stats
        self.has_occlusions = bool(has_occlusions)
        self.loss_cfg = cfg.loss_config(has_occlusions)
        self.weights = weights or init_weights(cfg.seed, K, cfg.D, cfg.trunk)
        self.params = self.weights.parameters()
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.scheduler = PlateauScheduler(cfg.lr, cfg.lr_decay_factor, cfg.plateau_patience,
                                          cfg.plateau_threshold, cfg.min_lr)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.epoch = 0
        self.steps = 0
        self.history = []
        self.layout = None

    def train_step(self, Yn, v):
        # non-finite values are caught explicitly, so numpy's warnings are noise here
        with np.errstate(over="ignore", invalid="ignore"), ad.Tape() as tape:
            loss, parts = total_loss(Yn, v, self.weights, self.loss_cfg, self.rng, training=True)
            grads = tape.backward(loss, self.params)
        new_w, self.velocity = sgd_momentum_step([p.data for p in self.params], grads,
                                                 self.velocity, self.scheduler.lr, self.cfg.momentum)
        for p, w in zip(self.params, new_w):
            p.data = w
        self.steps += 1
        return parts

    def run_epoch(self, Yn, v, step_log=None):
        n = len(Yn)
        order = self.rng.permutation(n)
        sums, count = {}, 0
        lr = self.scheduler.lr
        for start in range(0, n, self.cfg.batch_size):
            idx = order[start:start + self.cfg.batch_size]
            parts = self.train_step(Yn[idx], v[idx])
            for k, val in parts.items():
                sums[k] = sums.get(k, 0.0) + val * len(idx)
            count += len(idx)
            if step_log is not None:
                step_log({"step": self.steps, "epoch": self.epoch, **parts, "lr": lr})
        means = {k: val / count for k, val in sums.items()}
        self.scheduler.step(means["total"], self.epoch)
        record = {"epoch": self.epoch, **means, "lr": lr}
        self.history.append(record)
        self.epoch += 1
        return record

    def state_dict(self):
        return {
            "velocity": [vel.copy() for vel in self.velocity],
            "scheduler": self.scheduler.state_dict(),
            "rng": self.rng.bit_generator.state,
            "epoch": self.epoch,
            "steps": self.steps,
            "history": list(self.history),
        }

    def load_state_dict(self, state):
        self.velocity = [np.asarray(vel, dtype=np.float64).copy() for vel in state["velocity"]]
        self.scheduler.load_state_dict(state["scheduler"])
        self.rng.bit_generator.state = state["rng"]
        self.epoch = state["epoch"]
        self.steps = state["steps"]
        self.history = list(state["history"])


def _jsonl_writer(path):
    handle = open(path, "a")

    def write(record):
        handle.write(json.dumps(record) + "\n")
        handle.flush()

    write.close = handle.close
    return write


def fit(dataset, cfg, trainer=None, step_log=None, on_epoch=None, on_divergence=None):
    """Train on the dataset's ``train`` split.

    Returns ``(trainer, report)``; ``trainer.weights`` holds the model. Pass an
    existing ``trainer`` to resume; its epoch counter continues.
    ``step_log`` may be a callable or a path for JSON-lines step records.
    ``on_divergence(trainer)`` runs before :class:`DivergenceError` is raised.
    """
    train = dataset.train() if (dataset.split == "train").any() else dataset
    if len(train) == 0:
        raise ValueError("no training views")
    if trainer is None:
        stats = compute_scale(train.Y, train.v)
        trainer = Trainer(cfg, train.K, stats, dataset.has_occlusions)
    Yn = normalize(train.Y, train.v, trainer.stats)
    v = train.v
    writer = _jsonl_writer(step_log) if isinstance(step_log, (str, bytes)) or hasattr(step_log, "__fspath__") else step_log
    started = time.perf_counter()
    try:
        while trainer.epoch < cfg.max_epochs and not trainer.scheduler.finished:
            try:
                record = trainer.run_epoch(Yn, v, writer)
            except (ad.NonFiniteError, FloatingPointError) as exc:
                if on_divergence is not None:
                    on_divergence(trainer)
                raise DivergenceError(f"training diverged at epoch {trainer.epoch}: {exc}") from exc
            log.info(json.dumps(record))
            if on_epoch is not None:
                on_epoch(trainer, record)
    finally:
        if hasattr(writer, "close"):
            writer.close()
    report = {
        "config": asdict(cfg),
        "normalization": asdict(trainer.stats),
        "epochs": trainer.history,
        "lr_trace": [rec["lr"] for rec in trainer.history],
        "lr_decays": list(trainer.scheduler.decays),
        "steps": trainer.steps,
        "wall_time": time.perf_counter() - started,
        "estimate_translation": trainer.loss_cfg.estimate_translation,
    }
    return trainer, report
