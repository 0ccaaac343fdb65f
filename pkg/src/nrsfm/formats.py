"""Dataset, checkpoint and report files; PLY point-cloud export.

Datasets and reports are plain JSON with nested lists (floats are written with
``repr`` precision, so values round-trip exactly). Checkpoints store weight
arrays as base64 of their raw float64 bytes. Schemas live in ``schemas/``.
"""

import base64
import json
from dataclasses import asdict
from importlib import resources

import jsonschema
import numpy as np

from .networks import ModelWeights, TrunkConfig
from .shapemodel import MulticlassLayout
from .synthgen import KeypointDataset
from .training import NormalizationStats, TrainConfig, Trainer

__all__ = [
    "SCHEMA_VERSION", "SchemaError", "load_schema", "dataset_to_dict", "dataset_from_dict",
    "save_dataset", "load_dataset", "save_checkpoint", "load_checkpoint", "checkpoint_bytes",
    "save_report", "write_ply", "read_ply", "write_metrics_csv",
]

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    pass


def load_schema(name):
    text = resources.files("nrsfm").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def _validate(doc, name):
    if not isinstance(doc, dict) or doc.get("schema_version") != SCHEMA_VERSION:
        found = doc.get("schema_version") if isinstance(doc, dict) else None
        raise SchemaError(f"{name}: unsupported schema_version {found!r} (expected {SCHEMA_VERSION})")
    try:
        jsonschema.validate(doc, load_schema(name))
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"{name}: {exc.message}") from None


def _encode(arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "dtype": "<f8",
            "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode(entry):
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def dataset_to_dict(ds):
    gt = None
    if ds.gt is not None:
        gt = {k: (None if val is None else np.asarray(val).tolist()) for k, val in ds.gt.items()}
    multiclass = None
    if ds.layout is not None:
        multiclass = {"counts": list(ds.layout.counts), "class_ids": ds.class_ids.tolist()}
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "nrsfm.dataset",
        "config": _jsonable(ds.config),
        "has_occlusions": ds.has_occlusions,
        "root_index": ds.root_index,
        "views": {"Y": ds.Y.tolist(), "v": ds.v.tolist()},
        "split": ds.split.tolist(),
        "gt": gt,
        "multiclass": multiclass,
    }


def dataset_from_dict(doc):
    _validate(doc, "dataset")
    Y = np.array(doc["views"]["Y"], dtype=np.float64)
    v = np.array(doc["views"]["v"], dtype=np.float64)
    n = len(Y)
    if Y.ndim != 3 or Y.shape[1] != 2 or v.shape != (n, Y.shape[2]) or len(doc["split"]) != n:
        raise SchemaError(f"dataset: inconsistent array shapes Y {Y.shape}, v {v.shape}")
    gt = None
    if doc.get("gt") is not None:
        gt = {}
        for key, val in doc["gt"].items():
            if val is None:
                gt[key] = None
            elif key == "shape_index":
                gt[key] = np.array(val, dtype=int)
            else:
                gt[key] = np.array(val, dtype=np.float64)
        structures = gt.get("structures")
        if structures is not None and structures.shape != (n, 3, Y.shape[2]):
            raise SchemaError(f"dataset: gt structures have shape {structures.shape}")
    layout = class_ids = None
    if doc.get("multiclass") is not None:
        layout = MulticlassLayout(doc["multiclass"]["counts"])
        class_ids = np.array(doc["multiclass"]["class_ids"], dtype=int)
        if layout.K != Y.shape[2] or len(class_ids) != n:
            raise SchemaError("dataset: multiclass layout does not match the views")
    return KeypointDataset(Y, v, np.array(doc["split"], dtype=str), gt, doc.get("config") or {},
                           doc["has_occlusions"], layout, class_ids, doc.get("root_index"))


def save_dataset(ds, path):
    with open(path, "w") as fh:
        json.dump(dataset_to_dict(ds), fh)


def load_dataset(path):
    with open(path) as fh:
        return dataset_from_dict(json.load(fh))


def checkpoint_dict(trainer, layout=None):
    weights = trainer.weights
    names = [name for name, _ in weights.named_parameters()]
    state = trainer.state_dict()
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "nrsfm.checkpoint",
        "dims": weights.dims(),
        "train_config": _jsonable(asdict(trainer.cfg)),
        "normalization": _jsonable(asdict(trainer.stats)),
        "has_occlusions": trainer.has_occlusions,
        "estimate_translation": trainer.loss_cfg.estimate_translation,
        "layout": None if layout is None else list(layout.counts),
        "weights": {name: _encode(arr) for name, arr in weights.state_dict().items()},
        "optimizer": {
            "velocity": {name: _encode(vel) for name, vel in zip(names, state["velocity"])},
            "scheduler": state["scheduler"],
            "rng": state["rng"],
            "epoch": state["epoch"],
            "steps": state["steps"],
            "history": _jsonable(state["history"]),
        },
    }


def checkpoint_bytes(trainer, layout=None):
    return json.dumps(checkpoint_dict(trainer, layout)).encode()


def save_checkpoint(trainer, path, layout=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(trainer, layout))


def load_checkpoint(path):
    """Rebuild a :class:`~nrsfm.training.Trainer` (weights and optimizer state)."""
    with open(path) as fh:
        doc = json.load(fh)
    _validate(doc, "checkpoint")
    cfg = TrainConfig(**doc["train_config"])
    dims = doc["dims"]
    weights = ModelWeights(dims["K"], dims["D"], TrunkConfig(**dims["trunk"]), dims["seed"])
    try:
        weights.load_state_dict({k: _decode(v) for k, v in doc["weights"].items()})
    except KeyError as exc:
        raise SchemaError(f"checkpoint: missing weight array {exc}") from None
    norm = doc["normalization"]
    stats = NormalizationStats(norm["scale"], tuple(norm.get("axis", (1.0, 0.0))))
    trainer = Trainer(cfg, dims["K"], stats, doc.get("has_occlusions", False), weights)
    opt = doc["optimizer"]
    names = [name for name, _ in weights.named_parameters()]
    trainer.load_state_dict({
        "velocity": [_decode(opt["velocity"][name]) for name in names],
        "scheduler": opt["scheduler"], "rng": opt["rng"], "epoch": opt["epoch"],
        "steps": opt["steps"], "history": opt["history"],
    })
    trainer.layout = None if doc.get("layout") is None else MulticlassLayout(doc["layout"])
    return trainer


def save_report(report, path, kind=None):
    doc = dict(report)
    if kind is not None:
        doc = {"schema_version": SCHEMA_VERSION, "kind": kind, **doc}
        if kind == "nrsfm.metrics":
            _validate(doc, "metrics")
    with open(path, "w") as fh:
        json.dump(_jsonable(doc), fh, indent=1)


def write_metrics_csv(rows, path):
    """``rows`` are dicts sharing keys; written with a header line."""
    import csv

    rows = list(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def write_ply(path, X, visibility=None):
    """ASCII PLY with one vertex per keypoint and a ``visibility`` scalar."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != 3:
        raise ValueError(f"expected a 3xK structure, got {X.shape}")
    K = X.shape[1]
    vis = np.ones(K) if visibility is None else np.asarray(visibility, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {K}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        fh.write("property float visibility\nend_header\n")
        for k in range(K):
            x, y, z = (float(c) for c in X[:, k])
            fh.write(f"{x!r} {y!r} {z!r} {vis[k]:g}\n")


def read_ply(path):
    """Parse the ASCII PLY subset written by :func:`write_ply`."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if lines[:2] != ["ply", "format ascii 1.0"]:
        raise ValueError("not an ASCII PLY file")
    end = lines.index("end_header")
    count = None
    props = []
    for line in lines[2:end]:
        parts = line.split()
        if parts[0] == "element" and parts[1] == "vertex":
            count = int(parts[2])
        elif parts[0] == "property":
            props.append(parts[-1])
    rows = np.array([[float(t) for t in line.split()] for line in lines[end + 1:end + 1 + count]])
    rows = rows.reshape(count, len(props))
    return {name: rows[:, i] for i, name in enumerate(props)}
