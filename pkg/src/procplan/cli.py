"""Command line entry point: ``procplan {generate-data,train,eval,plan,inspect}``.

Exit codes: 0 success, 1 validation / parse / integrity errors, 2 runtime or numeric failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import EVAL_MODES, TRAIN_MODES, load_config
from .data import PlanningSample, dataset_fingerprint, load_dataset, save_dataset
from .errors import IntegrityError, NumericError, ParseError, ProcPlanError, TrainingError, TransportError
from .errors import ValidationError
from .evaluation import cross_dataset_eval, evaluate, infer_closed_set, infer_open_vocab
from .pipeline import load_model, load_or_generate, splits, train
from .training import FreezeManifest, load_checkpoint, read_manifest, verify_freeze

logger = logging.getLogger("procplan")


def cmd_generate_data(args):
    cfg = load_config(args.config)
    dataset, vocab = load_or_generate(cfg)
    save_dataset(dataset, vocab, args.out)
    print(f"wrote {len(dataset)} samples, {len(vocab)} steps to {args.out}")
    print(f"fingerprint {dataset_fingerprint(dataset, vocab)}")


def cmd_train(args):
    cfg = load_config(args.config)
    if args.data:
        dataset, vocab = load_dataset(args.data)
    else:
        dataset, vocab = load_or_generate(cfg)
    train_data = splits(cfg, dataset)["train"]
    out_dir = Path(args.out or cfg.io.output_dir)
    stages = {"1": (1,), "2": (2,), "both": (1, 2)}[args.stage]
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(cfg, train_data, vocab, stages=stages, mode=args.mode, resume=resume, out_dir=out_dir)
    for stage, ckpt in sorted(result.checkpoints.items()):
        print(f"stage {stage}: {out_dir / f'stage{stage}.ckpt'}  lm_base {ckpt.hashes['lm_base'][:12]}")
    print(f"loss log: {out_dir / 'loss_log.jsonl'} ({len(result.log)} steps)")


def cmd_eval(args):
    cfg = load_config(args.config)
    model = load_model(args.checkpoint)
    if args.data:
        dataset, vocab = load_dataset(args.data)
    else:
        dataset, vocab = load_or_generate(cfg)
        dataset = splits(cfg, dataset)[cfg.eval.split]
    modes = args.mode or list(cfg.eval.modes)
    horizons = args.horizon or [dataset.horizon]
    reports = []
    for horizon in horizons:
        if horizon != dataset.horizon or horizon != model.horizon:
            raise ValidationError(f"horizon {horizon} does not match dataset ({dataset.horizon}) "
                                  f"and model ({model.horizon})", field="horizon")
        if args.cross_vocab:
            other, other_vocab = load_dataset(args.cross_vocab)
            reports.append(cross_dataset_eval(model, other, other_vocab, seed=cfg.seed))
            continue
        for mode in modes:
            reports.append(evaluate(model, dataset, vocab, mode=mode, seed=cfg.seed))
    text = "".join(r.to_json() + "\n" for r in reports)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def _read_sample(args, d_raw):
    if args.sample_file:
        dataset, _ = load_dataset(args.sample_file)
        if not 0 <= args.index < len(dataset):
            raise ValidationError(f"sample index {args.index} out of range (file has {len(dataset)})", field="index")
        return dataset.samples[args.index]
    if args.start and args.goal:
        start = [float(x) for x in args.start.split(",")]
        goal = [float(x) for x in args.goal.split(",")]
        if len(start) != d_raw or len(goal) != d_raw:
            raise ValidationError(f"feature vectors must have {d_raw} values", field="start")
        return PlanningSample(-1, -1, tuple(start), tuple(goal), ())
    raise ValidationError("give --sample-file or both --start and --goal", field="sample_file")


def cmd_plan(args):
    model = load_model(args.checkpoint)
    sample = _read_sample(args, model.config.d_raw)
    labels = model.vocabulary.labels
    ids = infer_closed_set(model, sample)
    print("closed-set plan:")
    for k, i in enumerate(ids, start=1):
        print(f"  step {k}: [{i}] {labels[i]}")
    candidates = labels
    if args.open_vocab:
        candidates = [line.strip() for line in Path(args.open_vocab).read_text(encoding="utf-8").splitlines()
                      if line.strip()]
    plan = infer_open_vocab(model, sample, candidates)
    print(f"caption: {plan.caption}")
    for k, (seg, label) in enumerate(zip(plan.segments, plan.labels), start=1):
        print(f"  step {k}: {seg!r} -> {label}")
    if plan.fallback:
        print("  (caption was malformed; fallback segmentation used)")


def cmd_inspect(args):
    manifest = read_manifest(args.checkpoint)
    ckpt = load_checkpoint(args.checkpoint)
    print(f"checkpoint {args.checkpoint}")
    print(f"stage {ckpt.stage}  epoch {ckpt.epoch}  config fingerprint {ckpt.config_fingerprint}")
    for group, info in manifest["groups"].items():
        n = sum(int(np.prod(t["shape"])) for t in info["tensors"].values())
        shapes = ", ".join(f"{name}{tuple(t['shape'])}" for name, t in list(info["tensors"].items())[:3])
        more = " ..." if len(info["tensors"]) > 3 else ""
        print(f"  {group:22s} {n:8d} params  {info['hash'][:16]}  {shapes}{more}")
    if args.against:
        other = load_checkpoint(args.against)
        report = verify_freeze(other, ckpt, FreezeManifest(), ckpt.stage)
        print(f"changed vs {args.against}: {report.changed}")
        print(f"violations: {report.violations}")
        if report.violations:
            return 1


def build_parser():
    parser = argparse.ArgumentParser(prog="procplan", description="Procedure planning from start/goal observations.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic dataset file")
    p.add_argument("--config", help="run config file (YAML/JSON); defaults apply when omitted")
    p.add_argument("--out", required=True, help="output dataset path (.jsonl)")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="two-stage training; writes checkpoints and a loss log")
    p.add_argument("--config", help="run config file")
    p.add_argument("--data", help="dataset file (default: generate from config)")
    p.add_argument("--stage", choices=("1", "2", "both"), default="both", help="stages to run")
    p.add_argument("--mode", choices=TRAIN_MODES, help="training schedule (overrides train.mode)")
    p.add_argument("--resume", help="stage-1 checkpoint to start stage 2 from")
    p.add_argument("--out", help="output directory (overrides io.output_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; one JSON report per line")
    p.add_argument("--config", help="run config file")
    p.add_argument("--checkpoint", required=True, help="checkpoint archive")
    p.add_argument("--data", help="dataset file (default: config data, eval.split)")
    p.add_argument("--mode", choices=EVAL_MODES, action="append", help="inference mode; repeatable")
    p.add_argument("--horizon", type=int, action="append", help="planning horizon; repeatable")
    p.add_argument("--cross-vocab", help="dataset with a different step vocabulary, evaluated by retrieval")
    p.add_argument("--out", help="write reports to this file as well")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plan", help="plan one sample with both inference modes")
    p.add_argument("--checkpoint", required=True, help="checkpoint archive")
    p.add_argument("--sample-file", help="dataset file holding the sample")
    p.add_argument("--index", type=int, default=0, help="sample index within --sample-file")
    p.add_argument("--start", help="comma-separated start features")
    p.add_argument("--goal", help="comma-separated goal features")
    p.add_argument("--open-vocab", help="text file with one candidate label per line")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("inspect", help="print a checkpoint manifest")
    p.add_argument("--checkpoint", required=True, help="checkpoint archive")
    p.add_argument("--against", help="earlier checkpoint to diff group hashes against")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except (ValidationError, ParseError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, NumericError, TransportError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except ProcPlanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
