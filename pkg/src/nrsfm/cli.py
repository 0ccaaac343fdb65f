"""Command-line entry point: ``nrsfm <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric divergence.
``NRSFM_OUTPUT_DIR`` sets the directory for relative output paths and
``NRSFM_THREADS`` caps BLAS threads.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .classical import (DegenerateStructureError, MetricUpgradeError, feasibility_check,
                        monocular_fit, rigid_factorize)
from .evaluation import EvalProtocol, Reconstructor, ablation_table, evaluate
from .formats import (SchemaError, load_checkpoint, load_dataset, save_checkpoint, save_dataset,
                      save_report, write_metrics_csv, write_ply)
from .networks import TrunkConfig
from .shapemodel import KeypointView
from .synthgen import SynthConfig, generate, generate_multiclass, generate_rigid, sweep_grid
from .training import DivergenceError, TrainConfig, fit

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("nrsfm")


class DataError(Exception):
    pass


def _out(path):
    path = Path(path)
    base = os.environ.get("NRSFM_OUTPUT_DIR")
    if base and not path.is_absolute():
        path = Path(base) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _floats(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text):
    return [int(t) for t in text.split(",") if t.strip()]


def _add_synth_flags(p):
    p.add_argument("--keypoints", "-K", type=int, default=30)
    p.add_argument("--rank", type=int, default=6, help="rank of the generating basis")
    p.add_argument("--shapes", type=int, default=100)
    p.add_argument("--views-per-shape", type=int, default=30)
    p.add_argument("--alpha-std", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=0.0, help="std of 2D Gaussian noise")
    p.add_argument("--p-occ", type=float, default=0.0, help="per-point occlusion probability")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--max-view-angle", type=float,
                   help="limit viewpoints to rotations of at most this angle (radians)")
    p.add_argument("--seed", type=int, default=0)


def _synth_config(args, **override):
    values = dict(K=args.keypoints, D_true=args.rank, num_shapes=args.shapes,
                  views_per_shape=args.views_per_shape, alpha_std=args.alpha_std,
                  noise_sigma=args.sigma, occlusion_prob=args.p_occ,
                  test_fraction=args.test_fraction, seed=args.seed,
                  max_view_angle=args.max_view_angle)
    values.update(override)
    return SynthConfig(**values)


def _add_train_flags(p):
    d = TrainConfig()
    t = TrunkConfig()
    p.add_argument("--variant", choices=["base", "equiv", "full", "canon"], default=d.variant)
    p.add_argument("--basis-dim", "-D", type=int, default=d.D)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--epochs", type=int, default=d.max_epochs)
    p.add_argument("--patience", type=int, default=d.plateau_patience)
    p.add_argument("--decay", type=float, default=d.lr_decay_factor)
    p.add_argument("--min-lr", type=float, default=d.min_lr)
    p.add_argument("--epsilon", type=float, default=d.epsilon)
    p.add_argument("--blocks", type=int, default=t.num_blocks)
    p.add_argument("--width", type=int, default=t.outer)
    p.add_argument("--bottleneck", type=int, default=t.bottleneck)
    p.add_argument("--no-batch-norm", action="store_true")
    p.add_argument("--detach-psi-input", action="store_true")
    p.add_argument("--translation", choices=["auto", "on", "off"], default="auto")
    p.add_argument("--train-seed", type=int, default=d.seed)


def _train_config(args):
    trunk = TrunkConfig(num_blocks=args.blocks, outer=args.width, bottleneck=args.bottleneck,
                        batch_norm=not args.no_batch_norm)
    translate = {"auto": None, "on": True, "off": False}[args.translation]
    return TrainConfig(batch_size=args.batch_size, lr=args.lr, momentum=args.momentum,
                       plateau_patience=args.patience, lr_decay_factor=args.decay,
                       min_lr=args.min_lr, max_epochs=args.epochs, seed=args.train_seed,
                       variant=args.variant, D=args.basis_dim, trunk=trunk, epsilon=args.epsilon,
                       detach_psi_input=args.detach_psi_input, estimate_translation=translate)


def _load_dataset(path):
    try:
        return load_dataset(path)
    except (OSError, json.JSONDecodeError, SchemaError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from None


def _load_checkpoint(path):
    try:
        return load_checkpoint(path)
    except (OSError, json.JSONDecodeError, SchemaError, KeyError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None


def cmd_generate(args):
    cfg = _synth_config(args)
    if args.rigid:
        ds = generate_rigid(cfg)
    elif args.classes:
        ds = generate_multiclass(cfg, _ints(args.classes))
    else:
        ds = generate(cfg)
    path = _out(args.output)
    save_dataset(ds, path)
    summary = {"path": str(path), "N": len(ds), "K": ds.K, "D_true": ds.config.get("D_true"),
               "sigma": cfg.noise_sigma, "p_occ": cfg.occlusion_prob, "seed": cfg.seed,
               "visible_fraction": float(ds.v.mean())}
    print(json.dumps(summary))
    return EXIT_OK


def _train(ds, cfg, args, checkpoint_path, step_log=None, resume=None):
    def on_epoch(trainer, record):
        log.info("epoch %d total %.6f lr %g", record["epoch"], record["total"], record["lr"])
        every = getattr(args, "checkpoint_every", 0)
        if every and checkpoint_path and trainer.epoch % every == 0:
            save_checkpoint(trainer, checkpoint_path, ds.layout)

    def on_divergence(trainer):
        if checkpoint_path:
            save_checkpoint(trainer, str(checkpoint_path) + ".diverged", ds.layout)

    trainer, report = fit(ds, cfg, trainer=resume, step_log=step_log, on_epoch=on_epoch,
                          on_divergence=on_divergence)
    trainer.layout = ds.layout
    return trainer, report


def cmd_train(args):
    ds = _load_dataset(args.dataset)
    resume = None
    if args.resume:
        resume = _load_checkpoint(args.resume)
        if resume.weights.K != ds.K:
            raise DataError(f"checkpoint expects K={resume.weights.K}, dataset has K={ds.K}")
        cfg = resume.cfg
        cfg.max_epochs = args.epochs
    else:
        cfg = _train_config(args)
    ckpt = _out(args.output)
    step_log = str(_out(args.step_log)) if args.step_log else None
    trainer, report = _train(ds, cfg, args, ckpt, step_log, resume)
    save_checkpoint(trainer, ckpt, ds.layout)
    report["dataset"] = str(args.dataset)
    report["checkpoint"] = str(ckpt)
    report_path = _out(args.report or str(ckpt) + ".report.json")
    save_report(report, report_path, kind="nrsfm.train_report")
    last = report["epochs"][-1] if report["epochs"] else {}
    print(json.dumps({"checkpoint": str(ckpt), "report": str(report_path),
                      "epochs": trainer.epoch, "final": last}))
    return EXIT_OK


def _protocol(args):
    return EvalProtocol(args.depth_centering, not args.no_flip)


def cmd_eval(args):
    ds = _load_dataset(args.dataset)
    if args.split != "all":
        ds = ds.subset(np.flatnonzero(ds.split == args.split))
    if len(ds) == 0:
        raise DataError(f"dataset has no {args.split} views")
    rows = []
    for path in args.checkpoint:
        trainer = _load_checkpoint(path)
        if trainer.weights.K != ds.K:
            raise DataError(f"checkpoint {path} expects K={trainer.weights.K}, dataset has K={ds.K}")
        model = Reconstructor(trainer.weights, trainer.stats, trainer.loss_cfg.estimate_translation)
        report = evaluate(model, ds, _protocol(args))
        label = trainer.cfg.variant if len(args.checkpoint) > 1 else Path(path).stem
        report["label"] = label
        report["config"] = asdict(trainer.cfg)
        rows.append((label, report))
    if args.output:
        out = _out(args.output)
        if len(rows) == 1:
            save_report(rows[0][1], out, kind="nrsfm.metrics")
        else:
            for label, rep in rows:
                save_report(rep, out.with_name(f"{out.stem}.{label}{out.suffix}"), kind="nrsfm.metrics")
    if args.csv:
        write_metrics_csv([{"method": label, **{k: rep["summary"][k] for k in
                            ("mpjpe", "stress", "reprojection_rmse", "flip_rate")}}
                           for label, rep in rows], _out(args.csv))
    print(ablation_table(rows))
    return EXIT_OK


def _read_view(args, K):
    if args.view:
        with open(args.view) as fh:
            doc = json.load(fh)
        Y = np.asarray(doc["Y"], dtype=np.float64)
        v = np.asarray(doc.get("v", np.ones(Y.shape[1])), dtype=np.float64)
    else:
        ds = _load_dataset(args.dataset)
        if not 0 <= args.index < len(ds):
            raise DataError(f"view index {args.index} out of range")
        Y, v = ds.Y[args.index], ds.v[args.index]
    try:
        view = KeypointView(Y, v)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if view.K != K:
        raise DataError(f"view has {view.K} keypoints, model expects {K}")
    return view


def cmd_reconstruct(args):
    trainer = _load_checkpoint(args.checkpoint)
    view = _read_view(args, trainer.weights.K)
    model = Reconstructor(trainer.weights, trainer.stats, trainer.loss_cfg.estimate_translation)
    out = model.reconstruct_views(view.Y[None], view.v[None])
    result = {
        "alpha": out["alpha"][0].tolist(), "theta": out["theta"][0].tolist(),
        "canonical": out["canonical"][0].tolist(), "camera": out["camera"][0].tolist(),
        "reprojection_rmse": float(out["reprojection_rmse"][0]),
    }
    if args.ply:
        write_ply(_out(args.ply), out["camera"][0], view.v)
        result["ply"] = str(_out(args.ply))
    if args.canonical_ply:
        write_ply(_out(args.canonical_ply), out["canonical"][0], view.v)
    if args.output:
        with open(_out(args.output), "w") as fh:
            json.dump(result, fh, indent=1)
    print(json.dumps(result))
    return EXIT_OK


def cmd_sweep(args):
    sigmas, p_occs = _floats(args.sigmas), _floats(args.p_occs)
    if not sigmas or not p_occs:
        raise DataError("sweep grids must be non-empty")
    keypoints = _ints(args.keypoint_counts) if args.keypoint_counts else [args.keypoints]
    cfg = _train_config(args)
    rows, matrices = [], {}
    for K in keypoints:
        matrix = np.full((len(sigmas), len(p_occs)), np.nan)
        for cell in sweep_grid(_synth_config(args, K=K), sigmas, p_occs):
            i, j = sigmas.index(cell.sigma), p_occs.index(cell.p_occ)
            row = {"K": K, "sigma": cell.sigma, "p_occ": cell.p_occ}
            try:
                ds = cell.generate()
                trainer, _ = fit(ds, cfg)
                model = Reconstructor(trainer.weights, trainer.stats,
                                      trainer.loss_cfg.estimate_translation)
                summary = evaluate(model, ds.test(), _protocol(args))["summary"]
                row.update(mpjpe=summary["mpjpe"], stress=summary["stress"], error=None)
                matrix[i, j] = summary["mpjpe"]
            except (DivergenceError, ValueError, FloatingPointError) as exc:
                row.update(mpjpe=None, stress=None, error=str(exc))
            log.info("cell %s", row)
            rows.append(row)
        matrices[str(K)] = matrix
    doc = {"sigmas": sigmas, "p_occs": p_occs, "train_config": asdict(cfg),
           "mpjpe": {k: [[None if np.isnan(x) else float(x) for x in r] for r in m]
                     for k, m in matrices.items()},
           "cells": rows}
    save_report(doc, _out(args.output), kind="nrsfm.sweep")
    if args.csv:
        write_metrics_csv(rows, _out(args.csv))
    for K, m in matrices.items():
        print(f"K={K}  rows: sigma {sigmas}  columns: p_occ {p_occs}")
        for s, r in zip(sigmas, m):
            print(f"  {s:<8g}" + "".join(f"{x:>10.4f}" for x in r))
    return EXIT_OK


def cmd_oracle_rigid(args):
    ds = _load_dataset(args.dataset)
    if (ds.v < 1).any():
        raise DataError("rigid factorization needs fully visible views")
    try:
        sol = rigid_factorize(ds.Y)
    except (DegenerateStructureError, MetricUpgradeError) as exc:
        raise DataError(str(exc)) from None
    result = {"views": len(ds), "K": ds.K, "residual": sol.residual,
              "structure": sol.X.tolist(), "first_view": sol.M_stack[:2].tolist()}
    if args.output:
        save_report(result, _out(args.output))
    if args.ply:
        write_ply(_out(args.ply), sol.X)
    print(json.dumps({k: result[k] for k in ("views", "K", "residual")}))
    return EXIT_OK


def cmd_oracle_fit(args):
    ds = _load_dataset(args.dataset)
    if args.basis:
        with open(args.basis) as fh:
            S = np.asarray(json.load(fh), dtype=np.float64)
    elif args.checkpoint:
        trainer = _load_checkpoint(args.checkpoint)
        S = trainer.weights.basis.data / trainer.stats.scale
    elif ds.gt is not None and ds.gt.get("basis") is not None:
        S = ds.gt["basis"]
    else:
        raise DataError("no basis: pass --basis or --checkpoint, or use a dataset with ground truth")
    indices = _ints(args.indices) if args.indices else range(len(ds))
    rows = []
    for i in indices:
        try:
            res = monocular_fit(ds.view(i), S, restarts=args.restarts, rng=[args.seed, i])
        except ValueError as exc:
            raise DataError(str(exc)) from None
        rows.append({"index": i, "residual": res.residual, "alpha": res.pose.alpha.tolist(),
                     "theta": res.pose.theta.tolist()})
    doc = {"restarts": args.restarts, "views": rows,
           "median_residual": float(np.median([r["residual"] for r in rows]))}
    if args.output:
        save_report(doc, _out(args.output))
    print(json.dumps({"views": len(rows), "median_residual": doc["median_residual"]}))
    return EXIT_OK


def cmd_feasibility(args):
    verdict = feasibility_check(args.views, args.keypoints, args.basis_dim)
    print(json.dumps(asdict(verdict)))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="nrsfm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    _add_synth_flags(p)
    p.add_argument("--rigid", action="store_true", help="one fixed structure seen from many views")
    p.add_argument("--classes", help="comma-separated keypoint counts of a multiclass set")
    p.add_argument("--output", "-o", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the networks on a dataset")
    p.add_argument("dataset")
    _add_train_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--step-log", help="JSON-lines file for per-step loss records")
    p.add_argument("--report")
    p.add_argument("--output", "-o", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate one or more checkpoints")
    p.add_argument("dataset")
    p.add_argument("--checkpoint", "-c", action="append", required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--depth-centering", choices=["mean_depth", "root_joint"], default="mean_depth")
    p.add_argument("--no-flip", action="store_true")
    p.add_argument("--output", "-o")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", help="reconstruct a single view")
    p.add_argument("checkpoint")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--view", help='JSON file with "Y" (2xK) and optional "v"')
    src.add_argument("--dataset")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--ply", help="camera-frame point cloud output")
    p.add_argument("--canonical-ply")
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("sweep", help="noise/occlusion robustness grid")
    _add_synth_flags(p)
    _add_train_flags(p)
    p.add_argument("--sigmas", default="0,0.005,0.02")
    p.add_argument("--p-occs", default="0,0.2,0.5")
    p.add_argument("--keypoint-counts", help="comma-separated K values (default: --keypoints)")
    p.add_argument("--depth-centering", choices=["mean_depth", "root_joint"], default="mean_depth")
    p.add_argument("--no-flip", action="store_true")
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle-rigid", help="classical rigid factorization of a dataset")
    p.add_argument("dataset")
    p.add_argument("--output", "-o")
    p.add_argument("--ply")
    p.set_defaults(func=cmd_oracle_rigid)

    p = sub.add_parser("oracle-fit", help="per-view least-squares fit with a known basis")
    p.add_argument("dataset")
    p.add_argument("--basis", help="JSON file holding a 3D x K basis")
    p.add_argument("--checkpoint", help="use the basis learned by a checkpoint")
    p.add_argument("--indices")
    p.add_argument("--restarts", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_oracle_fit)

    p = sub.add_parser("feasibility", help="count equations and unknowns")
    p.add_argument("--views", "-N", type=int, required=True)
    p.add_argument("--keypoints", "-K", type=int, required=True)
    p.add_argument("--basis-dim", "-D", type=int)
    p.set_defaults(func=cmd_feasibility)
    return parser


def _limit_threads():
    threads = os.environ.get("NRSFM_THREADS")
    if threads:
        from threadpoolctl import threadpool_limits

        threadpool_limits(int(threads))


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _limit_threads()
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
