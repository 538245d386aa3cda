"""Command-line entry points.

Subcommands: synth, train, train-two-stage, eval, grad-check, bench-losses,
icc.  Training flags mirror TrainConfig; any of them may instead come from a
JSON config file (--config), with explicit command-line flags taking
precedence over file values.  ENGAGERANK_LOG_LEVEL controls log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import featurepipe, harness, metrics, model
from .harness import LOSSES, TrainConfig

CONFIG_VERSION = 1

# TrainConfig fields the CLI and config files may set
_CONFIG_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (see README for schema)")
    p.add_argument("--preset", choices=["desk", "paper"],
                   help="base preset applied before config file and flags")
    p.add_argument("--loss", choices=LOSSES)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--pool-size", type=int, dest="pool_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr-start", type=float, dest="lr_start")
    p.add_argument("--lr-end", type=float, dest="lr_end")
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--momentum", type=float)
    p.add_argument("--sampler", choices=harness.SAMPLERS)
    p.add_argument("--use-audio", action=argparse.BooleanOptionalAction,
                   dest="use_audio", default=None)
    p.add_argument("--ablation", choices=list(model.FUSIONS))
    p.add_argument("--seed", type=int)
    p.add_argument("--center-weight", type=float, dest="center_weight")
    p.add_argument("--cb-beta", type=float, dest="cb_beta")
    p.add_argument("--cb-gamma", type=float, dest="cb_gamma")
    p.add_argument("--detach-margin", action=argparse.BooleanOptionalAction,
                   dest="detach_margin", default=None)
    p.add_argument("--score-before-step", action=argparse.BooleanOptionalAction,
                   dest="score_before_step", default=None)
    p.add_argument("--stage2-epochs", type=int, dest="stage2_epochs")
    p.add_argument("--init-from", dest="init_from",
                   help="checkpoint to initialize parameters from")
    p.add_argument("--channels", type=int, dest="n_channels")
    p.add_argument("--global-dim", type=int, dest="global_dim")
    p.add_argument("--width", type=int)
    p.add_argument("--n-chunks", type=int, dest="n_chunks")
    p.add_argument("--dropout", type=float)
    p.add_argument("--speech-dim", type=int, dest="speech_dim")
    p.add_argument("--min-frames", type=int, dest="min_frames")


def _load_config_file(path: str) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"config file {path!r} must hold a JSON object")
    version = data.pop("config_version", None)
    if version != CONFIG_VERSION:
        raise ValueError(
            f"config file {path!r} has config_version {version!r}; expected "
            f"{CONFIG_VERSION}")
    unknown = set(data) - _CONFIG_FIELDS
    if unknown:
        raise ValueError(f"config file {path!r} has unknown keys: {sorted(unknown)}")
    return data


def build_train_config(args: argparse.Namespace, train_path=None,
                       val_path=None) -> TrainConfig:
    """Merge preset < config file < explicit CLI flags into a TrainConfig."""
    merged: dict = {}
    if args.preset == "desk":
        merged.update(batch_size=32, pool_size=256, epochs=60, width=32)
    elif args.preset == "paper":
        merged.update(batch_size=256, pool_size=2048, epochs=1200, width=64)
    if args.config:
        merged.update(_load_config_file(args.config))
    for name in _CONFIG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    if train_path is not None:
        merged["train_path"] = train_path
    if val_path is not None:
        merged["val_path"] = val_path
    return TrainConfig(**merged)


def _write_history_csv(history: list, path) -> None:
    columns = ["epoch", "stage", "train_loss", "lr", "val_acc", "val_avg_acc"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in history:
            writer.writerow([row.get(c, "") for c in columns])


def _write_run_outputs(out_dir: str, state, history, val_set) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    harness.save_checkpoint(state, str(out / "checkpoint.npz"))
    _write_history_csv(history, out / "history.csv")
    if val_set is not None and len(val_set.records):
        report = harness.evaluate(state, val_set)
        (out / "metrics.json").write_text(report.to_json() + "\n")
        metrics.write_recall_csv(out / "recall.csv", {"model": report})
    print(f"run artifacts written to {out}")


def cmd_synth(args) -> int:
    proportions = tuple(int(x) for x in args.proportions.split(","))
    dataset = featurepipe.synth_dataset(
        n=args.n, n_channels=args.channels, global_dim=args.global_dim,
        n_frames=args.frames, proportions=proportions, noise=args.noise,
        seed=args.seed, split=args.split, speech_fraction=args.speech_fraction,
        speech_dim=args.speech_dim, saturation=args.saturation,
        modulation=args.modulation, warp=args.warp,
        label_flip=args.label_flip)
    featurepipe.save_records(dataset, args.out)
    print(f"wrote {len(dataset.records)} records to {args.out} "
          f"(class counts {dataset.class_counts().tolist()})")
    return 0


def _load_train_val(args):
    train_set = featurepipe.load_records(args.train)
    val_set = featurepipe.load_records(args.val) if args.val else None
    return train_set, val_set


def cmd_train(args) -> int:
    config = build_train_config(args, train_path=args.train, val_path=args.val)
    train_set, val_set = _load_train_val(args)
    state, history = harness.train(config, train_set, val_set)
    _write_run_outputs(args.out_dir, state, history, val_set)
    return 0


def cmd_train_two_stage(args) -> int:
    config = build_train_config(args, train_path=args.train, val_path=args.val)
    train_set, val_set = _load_train_val(args)
    state, history = harness.train_two_stage(config, train_set, val_set)
    _write_run_outputs(args.out_dir, state, history, val_set)
    return 0


def cmd_eval(args) -> int:
    state = harness.load_checkpoint(args.checkpoint)
    dataset = featurepipe.load_records(args.data)
    report = harness.evaluate(state, dataset, subset=args.subset)
    text = report.to_json()
    print(text)
    if args.metrics_out:
        Path(args.metrics_out).write_text(text + "\n")
    if args.recall_out:
        metrics.write_recall_csv(args.recall_out, {"model": report})
    return 0


def cmd_grad_check(args) -> int:
    config = TrainConfig.tiny(use_audio=args.audio)
    losses = args.losses.split(",") if args.losses else None
    report = harness.grad_check(config, n_params_max=args.max_params,
                                tolerance=args.tolerance, losses=losses)
    print(json.dumps(report, indent=2))
    return 0 if report["passed"] else 1


def cmd_bench_losses(args) -> int:
    base = build_train_config(args, train_path=args.train, val_path=args.val)
    train_set, val_set = _load_train_val(args)
    test_set = featurepipe.load_records(args.test)
    seeds = [int(s) for s in args.seeds.split(",")]
    # each token is "loss" or "loss:sampler", e.g. mse:class_balanced for the
    # class-sampled regression baseline
    variants = {}
    for token in args.losses.split(","):
        name, _, sampler = token.partition(":")
        overrides = {"loss": name}
        if sampler:
            overrides["sampler"] = sampler
        variants[token] = overrides
    results = harness.bench_losses(base, variants, seeds, train_set, val_set,
                                   test_set)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["variant", "seed", "acc", "avg_acc"])
        writer.writeheader()
        writer.writerows(results["rows"])
    (out / "summary.json").write_text(json.dumps(results["summary"], indent=2) + "\n")
    print(json.dumps(results["summary"], indent=2))
    return 0


def cmd_icc(args) -> int:
    ratings = np.loadtxt(args.ratings, delimiter=",", ndmin=2)
    value = metrics.icc_2_1(ratings)
    print(json.dumps({"icc": value}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="engagerank",
        description="Ordinal engagement scoring with a momentum-queue ranking loss")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic JSONL dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=3000)
    p.add_argument("--channels", type=int, default=featurepipe.DEFAULT_CHANNELS)
    p.add_argument("--global-dim", type=int, dest="global_dim",
                   default=featurepipe.DEFAULT_GLOBAL_DIM)
    p.add_argument("--frames", type=int, default=300)
    p.add_argument("--proportions",
                   default=",".join(str(x) for x in featurepipe.REFERENCE_PROPORTIONS))
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--saturation", type=float, default=0.0)
    p.add_argument("--modulation", type=float, default=0.0)
    p.add_argument("--warp", type=float, default=0.0)
    p.add_argument("--label-flip", type=float, dest="label_flip", default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.add_argument("--speech-fraction", type=float, dest="speech_fraction",
                   default=0.0)
    p.add_argument("--speech-dim", type=int, dest="speech_dim",
                   default=featurepipe.SPEECH_DIM)
    p.set_defaults(func=cmd_synth)

    for name, func, extra_help in (
            ("train", cmd_train, "train a model"),
            ("train-two-stage", cmd_train_two_stage,
             "visual stage then frozen-visual audio stage")):
        p = sub.add_parser(name, help=extra_help)
        p.add_argument("--train", required=True, help="training JSONL")
        p.add_argument("--val", help="validation JSONL")
        p.add_argument("--out-dir", required=True, dest="out_dir")
        _add_train_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subset", choices=["all", "speech_only"], default="all")
    p.add_argument("--metrics-out", dest="metrics_out")
    p.add_argument("--recall-out", dest="recall_out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check",
                       help="finite-difference check of all loss gradients")
    p.add_argument("--max-params", type=int, dest="max_params", default=1000)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--losses", help="comma list (default: all)")
    p.add_argument("--audio", action="store_true",
                   help="check the audio branch (scalar losses only)")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("bench-losses",
                       help="train several losses over seeds and tabulate metrics")
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--test", required=True)
    p.add_argument("--losses", required=True,
                   help="comma list of loss[:sampler] variants")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    _add_train_flags(p)
    p.set_defaults(func=cmd_bench_losses)

    p = sub.add_parser("icc", help="ICC(2,1) of a subjects-by-raters CSV")
    p.add_argument("--ratings", required=True)
    p.set_defaults(func=cmd_icc)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("ENGAGERANK_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
