"""Experiment runner: pretrain -> profile -> allocate -> train -> eval, plus
export-hist. Each stage reads its predecessor's artifact from --out and
writes its own, along with the fully resolved config it ran from.

Exit codes: 0 ok, 2 malformed config/input, 3 missing or bad artifact,
4 numerical failure (NaN/inf abort).
"""
import argparse
import json
import os
import sys

import numpy as np

from .tensor import NumericsError, ValidationError
from .config import (ConfigError, ExperimentConfig, apply_overrides,
                     apply_preset, load_config, save_config)
from .data import FormatError, load_train_val
from .allocation import BitAssignment, SensitivityProfile, allocate, score_sensitivity
from .training import (evaluate, pretrain, prepare_rngs, qat_prepare,
                       run_training)
from .checkpoint import (ArtifactError, export_histogram, load_checkpoint,
                         save_checkpoint)
from .fsio import atomic_write

METRIC_COLUMNS = ("epoch", "step", "lr", "task_loss", "commit_loss",
                  "train_acc", "val_acc")


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def _write_metrics(rows, path):
    lines = [",".join(METRIC_COLUMNS)]
    for r in rows:
        lines.append(",".join(_fmt(r[c]) for c in METRIC_COLUMNS))
    atomic_write(path, "\n".join(lines) + "\n")


def _write_json(doc, path):
    atomic_write(path, json.dumps(doc, indent=2) + "\n")


def _log_row(row):
    print(f"epoch {row['epoch']:3d}  step {row['step']:5d}  "
          f"lr {row['lr']:.5f}  task {row['task_loss']:.4f}  "
          f"commit {row['commit_loss']:.4f}  train {row['train_acc']:.4f}  "
          f"val {row['val_acc']:.4f}")


def _ckpt_prefix(args, cfg_out):
    if args.ckpt:
        return args.ckpt
    for name in ("qat-checkpoint", "fp-checkpoint"):
        prefix = os.path.join(cfg_out, name)
        if os.path.exists(prefix + ".json"):
            return prefix
    raise FileNotFoundError(os.path.join(cfg_out, "qat-checkpoint.json"))


def cmd_pretrain(cfg, args):
    train, val = load_train_val(cfg.dataset_path, cfg.dataset_format, cfg.seed)
    state, rows = pretrain(cfg, train, val, log=_log_row)
    summary = dict(rows[-1]) if rows else {}
    save_checkpoint(state, os.path.join(args.out, "fp-checkpoint"),
                    metrics_summary=summary)
    _write_metrics(rows, os.path.join(args.out, "metrics-pretrain.csv"))
    save_config(cfg, os.path.join(args.out, "resolved-pretrain.json"))
    if rows:
        print(f"pretrained {cfg.arch}: train {summary['train_acc']:.4f} "
              f"val {summary['val_acc']:.4f}")
    return 0


def cmd_profile(cfg, args):
    state = load_checkpoint(os.path.join(args.out, "fp-checkpoint"))
    train, _ = load_train_val(cfg.dataset_path, cfg.dataset_format, cfg.seed)
    profile = score_sensitivity(state.model,
                                train.batches(cfg.batch_size, prepare_rngs(cfg.seed)[0]),
                                cfg.n_sens_batches)
    doc = {"layers": [l.name for l in state.model.quantized_layers()]}
    doc.update(profile.to_dict())
    _write_json(doc, os.path.join(args.out, "sensitivity.json"))
    save_config(cfg, os.path.join(args.out, "resolved-profile.json"))
    print("sensitivity:", " ".join(f"{n}={s:.4g}" for n, s in
                                   zip(doc["layers"], profile.scores)))
    return 0


def cmd_allocate(cfg, args):
    spath = os.path.join(args.out, "sensitivity.json")
    if not os.path.exists(spath):
        raise FileNotFoundError(spath)
    with open(spath) as f:
        doc = json.load(f)
    profile = SensitivityProfile.from_dict(doc)
    assignment = allocate(profile, tuple(cfg.b_set), cfg.b_avg)
    out_doc = {"layers": doc.get("layers", [])}
    out_doc.update(assignment.to_dict())
    _write_json(out_doc, os.path.join(args.out, "assignment.json"))
    save_config(cfg, os.path.join(args.out, "resolved-allocate.json"))
    print(f"assigned bits {assignment.bits} (avg {assignment.average():.3f}, "
          f"continuous {[round(b, 3) for b in assignment.continuous]})")
    return 0


def cmd_train(cfg, args):
    state = load_checkpoint(os.path.join(args.out, "fp-checkpoint"))
    train, val = load_train_val(cfg.dataset_path, cfg.dataset_format, cfg.seed)
    assignment = None
    apath = os.path.join(args.out, "assignment.json")
    if cfg.precision == "mixed" and os.path.exists(apath):
        with open(apath) as f:
            assignment = BitAssignment.from_dict(json.load(f))
    qat_prepare(state, cfg, train, assignment=assignment)
    print(f"bit assignment: {state.quant.assignment.bits} "
          f"(avg {state.quant.assignment.average():.3f})")
    rows = run_training(state, train, val, cfg.epochs, log=_log_row)
    summary = dict(rows[-1]) if rows else {}
    save_checkpoint(state, os.path.join(args.out, "qat-checkpoint"),
                    metrics_summary=summary)
    _write_metrics(rows, os.path.join(args.out, "metrics-train.csv"))
    save_config(cfg, os.path.join(args.out, "resolved-train.json"))
    if rows:
        print(f"qat done: train {summary['train_acc']:.4f} "
              f"val {summary['val_acc']:.4f}")
    return 0


def cmd_eval(cfg, args):
    prefix = _ckpt_prefix(args, args.out)
    state = load_checkpoint(prefix)
    _, val = load_train_val(state.cfg.dataset_path, state.cfg.dataset_format,
                            state.cfg.seed)
    result = evaluate(state, val)
    doc = {"checkpoint": prefix, "top1_accuracy": result["top1_accuracy"],
           "mean_loss": result["mean_loss"]}
    _write_json(doc, os.path.join(args.out, "eval.json"))
    save_config(state.cfg, os.path.join(args.out, "resolved-eval.json"))
    print(f"eval {prefix}: top1 {result['top1_accuracy']:.4f} "
          f"loss {result['mean_loss']:.4f}")
    return 0


def cmd_export_hist(cfg, args):
    prefix = _ckpt_prefix(args, args.out)
    state = load_checkpoint(prefix)
    text = export_histogram(state, args.layer, args.what)
    path = os.path.join(args.out, f"hist-{args.layer}-{args.what}.csv")
    atomic_write(path, text)
    print(f"wrote {path}")
    return 0


_DISPATCH = {"pretrain": cmd_pretrain, "profile": cmd_profile,
             "allocate": cmd_allocate, "train": cmd_train,
             "eval": cmd_eval, "export-hist": cmd_export_hist}


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--preset", help="named preset applied over the config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override (repeatable; dotted keys reach "
                             "the dataset block)")
    common.add_argument("--out", default="adq-out", help="artifact directory")
    p = argparse.ArgumentParser(prog="adq", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common])
    sub.add_parser("profile", parents=[common])
    sub.add_parser("allocate", parents=[common])
    sub.add_parser("train", parents=[common])
    pe = sub.add_parser("eval", parents=[common])
    pe.add_argument("--ckpt", help="checkpoint prefix (default: newest in --out)")
    ph = sub.add_parser("export-hist", parents=[common])
    ph.add_argument("--ckpt", help="checkpoint prefix (default: newest in --out)")
    ph.add_argument("--layer", required=True)
    ph.add_argument("--what", choices=("weights", "codebook"), default="weights")
    return p


def _resolve_config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.preset:
        cfg = apply_preset(cfg, args.preset)
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    return cfg


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        os.makedirs(args.out, exist_ok=True)
        return _DISPATCH[args.command](cfg, args)
    except (ConfigError, FormatError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: missing artifact: {e}", file=sys.stderr)
        return 3
    except ArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericsError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
