"""Command-line entry point: ``cgs {gen-data,train,eval,balance,sweep}``.

Every command writes into a fresh ``--out`` directory. The directory is
assembled under a temporary name next to the target and renamed into place
only after all outputs exist and are finite, so a failed run never leaves a
half-written result behind.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import glob
import itertools
import logging
import os
import shutil
import sys
import tempfile

import numpy as np

from . import __version__
from .config import ConfigError, apply_overrides, dump_kv, parse_kv_text, read_kv
from .labels import balanced_proportions, class_proportions
from .metrics import evaluate
from .network import load_checkpoint
from .synthdata import (DatasetSpec, PGMError, generate_dataset, read_dataset, read_pgm,
                        write_dataset, write_pgm)
from .trainer import TrainConfig, TrainingError, evaluate_model, infer, train

log = logging.getLogger("cgs")

DEFAULT_MIX_GRID = "0,0.2,0.5,0.8,1.0"
# grid keys that only change inference; a sweep over these reuses one trained model
EVAL_ONLY_KEYS = {"mix_ratio"}


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# output directory handling


@contextlib.contextmanager
def atomic_output_dir(path):
    """Yield a staging directory that becomes ``path`` on success."""
    path = os.path.abspath(path)
    if os.path.exists(path):
        if not os.path.isdir(path) or os.listdir(path):
            raise CommandError(f"output directory {path} already exists and is not empty")
    parent = os.path.dirname(path)
    os.makedirs(parent, exist_ok=True)
    stage = tempfile.mkdtemp(prefix=f".{os.path.basename(path)}.", suffix=".partial", dir=parent)
    try:
        yield stage
    except BaseException:
        if not glob.glob(os.path.join(stage, "nan_batch_*.npz")):
            shutil.rmtree(stage, ignore_errors=True)
        raise
    if os.path.isdir(path):
        os.rmdir(path)
    os.rename(stage, path)


def _overrides(pairs):
    values = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        values.update(parse_kv_text(item, source="--set"))
    return values


def _require_finite(name, values):
    arr = np.asarray(list(values), dtype=float)
    if not np.all(np.isfinite(arr)):
        raise CommandError(f"non-finite values in {name}")


def _write_metrics(report, path):
    _require_finite("metrics", itertools.chain(report.dsc, report.jaccard, report.hd95, report.asd))
    report.to_csv(path)


def _dump_predictions(preds, ids, root):
    os.makedirs(root, exist_ok=True)
    for p, sid in zip(preds, ids):
        write_pgm(os.path.join(root, f"{sid}.pgm"), np.asarray(p, dtype=np.uint8))


def _train_config(args, extra=None):
    values = read_kv(args.config) if args.config else {}
    values.update(_overrides(args.set))
    values.update(extra or {})
    if args.seed is not None:
        values["seed"] = args.seed
    return apply_overrides(TrainConfig(), values)


def _dataset_for(cfg):
    return read_dataset(cfg.data_dir) if cfg.data_dir else generate_dataset(cfg.data)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, out):
    values = read_kv(args.config) if args.config else {}
    values.update(_overrides(args.set))
    if args.seed is not None:
        values["seed"] = args.seed
    spec = apply_overrides(DatasetSpec(), values)
    ds = generate_dataset(spec)
    write_dataset(ds, out)
    train_labels = np.concatenate([ds.labeled.labels, ds.unlabeled.labels])
    p = class_proportions(train_labels, spec.K)
    print("measured p (train split): " + ",".join(f"{v:.6f}" for v in p))
    print(f"wrote {sum(len(s) for s in ds.splits())} images to {args.out}")


def _train_and_report(cfg, out, ds=None, dump=True):
    ds = ds if ds is not None else _dataset_for(cfg)
    result = train(cfg, ds, out_dir=out)
    _require_finite("training log", (r["total"] for r in result.log))
    preds = infer(result.teacher, ds.test.images, cfg.mix_ratio)
    report = evaluate(preds, ds.test.labels, ds.spec.K)
    _write_metrics(report, os.path.join(out, "metrics.csv"))
    if dump:
        _dump_predictions(preds, ds.test.ids, os.path.join(out, "predictions"))
    return result, report, ds


def cmd_train(args, out):
    cfg = _train_config(args)
    with open(os.path.join(out, "config.cfg"), "w") as fh:
        fh.write("\n".join(dump_kv(cfg)) + "\n")
    result, report, _ = _train_and_report(cfg, out)
    print(f"{cfg.mode}: best val DSC {100 * result.best_val_dsc:.2f}% at iter {result.best_iter}")
    print("test " + report.summary())


def cmd_eval(args, out):
    if not args.checkpoint:
        raise CommandError("eval needs --checkpoint PATH")
    cfg = _train_config(args)
    model, meta = load_checkpoint(args.checkpoint)
    ds = _dataset_for(cfg)
    split = getattr(ds, args.split)
    if not len(split):
        raise CommandError(f"split {args.split!r} is empty")
    if model.K != ds.spec.K:
        raise CommandError(f"checkpoint has K={model.K} but the dataset has K={ds.spec.K}")
    preds = infer(model, split.images, cfg.mix_ratio)
    report = evaluate(preds, split.labels, model.K)
    _write_metrics(report, os.path.join(out, "metrics.csv"))
    _dump_predictions(preds, split.ids, os.path.join(out, "predictions"))
    print(f"{args.split} " + report.summary())


def _label_maps(root):
    labels_dir = os.path.join(root, "labels") if os.path.isdir(os.path.join(root, "labels")) else root
    files = sorted(glob.glob(os.path.join(labels_dir, "*.pgm")))
    if not files:
        raise CommandError(f"no .pgm label maps found in {labels_dir}")
    return [read_pgm(f) for f in files], labels_dir


def _infer_K(root, maps, values):
    if "K" in values:
        return int(values["K"])
    for cand in (os.path.join(root, "spec.cfg"), os.path.join(os.path.dirname(root.rstrip("/")), "spec.cfg")):
        if os.path.isfile(cand):
            return int(read_kv(cand).get("K", DatasetSpec.K))
    return int(max(int(m.max()) for m in maps))


def cmd_balance(args, out):
    if not args.labels:
        raise CommandError("balance needs --labels DIR")
    maps, _ = _label_maps(args.labels)
    values = _overrides(args.set)
    unknown = set(values) - {"K"}
    if unknown:
        raise ConfigError(f"unknown config key: {sorted(unknown)[0]}")
    K = _infer_K(args.labels, maps, values)
    report = balanced_proportions(class_proportions(maps, K))
    _require_finite("balance report", itertools.chain(report.p_prime, report.distance_after))
    report.to_csv(os.path.join(out, "balance.csv"))
    print(f"K={K} p=" + ",".join(f"{v:.4f}" for v in report.p)
          + " p'=" + ",".join(f"{v:.4f}" for v in report.p_prime))
    print(f"contraction ratio {report.ratio:.6g}")


def _parse_grid(items):
    grid = {}
    for item in items or [f"mix_ratio={DEFAULT_MIX_GRID}"]:
        key, sep, vals = item.partition("=")
        if not sep or not key.strip() or not vals.strip():
            raise ConfigError(f"--grid expects KEY=V1,V2,..., got {item!r}")
        grid[key.strip()] = [v.strip() for v in vals.split(",") if v.strip()]
    return grid


def cmd_sweep(args, out):
    grid = _parse_grid(args.grid)
    base = _train_config(args)
    for key in grid:  # validate every key before spending time on training
        apply_overrides(base, {key: grid[key][0]})
    train_keys = [k for k in grid if k not in EVAL_ONLY_KEYS]
    eval_keys = [k for k in grid if k in EVAL_ONLY_KEYS]
    ds = _dataset_for(base)
    rows = []
    for n, train_vals in enumerate(itertools.product(*(grid[k] for k in train_keys))):
        cfg = apply_overrides(base, dict(zip(train_keys, train_vals)))
        run_dir = os.path.join(out, f"run{n:03d}")
        os.makedirs(run_dir)
        result = train(cfg, ds, out_dir=run_dir)
        for eval_vals in itertools.product(*(grid[k] for k in eval_keys)):
            ecfg = apply_overrides(cfg, dict(zip(eval_keys, eval_vals)))
            report = evaluate_model(result.teacher, ds.test, ecfg.mix_ratio)
            _require_finite("sweep metrics", itertools.chain(report.dsc, report.hd95, report.asd))
            row = {"run": f"run{n:03d}"}
            row.update({k: getattr(ecfg, k) for k in grid})
            row.update(dsc=report.mean_dsc, jaccard=report.mean_jaccard,
                       hd95=report.mean_hd95, asd=report.mean_asd)
            row.update({f"dsc_c{i + 1}": d for i, d in enumerate(report.dsc)})
            rows.append(row)
            print(" ".join(f"{k}={row[k]}" for k in grid) + f" DSC={100 * report.mean_dsc:.2f}%")
    with open(os.path.join(out, "sweep.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    dsc = [r["dsc"] for r in rows]
    print(f"{len(rows)} rows; DSC spread {100 * (max(dsc) - min(dsc)):.2f} points")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic dataset (images/, labels/, manifest.csv)"),
    "train": (cmd_train, "train a model; writes log.csv, checkpoint.npz, metrics.csv, predictions/"),
    "eval": (cmd_eval, "evaluate a checkpoint; writes metrics.csv and predictions/"),
    "balance": (cmd_balance, "participation analysis of a label directory; writes balance.csv"),
    "sweep": (cmd_sweep, "grid of train/eval settings; writes sweep.csv"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="cgs", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", metavar="PATH", help="key = value config file")
        p.add_argument("--out", metavar="DIR", required=True, help="output directory (must not exist or be empty)")
        p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                       help="override a config key (dotted for nested keys); repeatable")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if name == "eval":
            p.add_argument("--checkpoint", metavar="PATH", help="checkpoint written by train")
            p.add_argument("--split", choices=("val", "test"), default="test")
        if name == "balance":
            p.add_argument("--labels", metavar="DIR", help="dataset root or a directory of label PGMs")
        if name == "sweep":
            p.add_argument("--grid", metavar="KEY=V1,V2", action="append",
                           help=f"values to sweep; repeatable (default mix_ratio={DEFAULT_MIX_GRID})")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        with atomic_output_dir(args.out) as stage:
            func(args, stage)
    except (CommandError, ConfigError, TrainingError, PGMError, ValueError, OSError) as exc:
        reason = " ".join(str(exc).split()) or type(exc).__name__
        print(f"cgs {args.command}: error: {reason}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
