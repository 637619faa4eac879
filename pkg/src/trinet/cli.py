"""Command-line entry point: ``trinet {run,probe,generate-data,diag}``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as synth
from . import pipeline as P
from .config import ConfigError, ExperimentConfig, load_config
from .diagnostics import export_embeddings

logger = logging.getLogger("trinet")


def _config(args) -> ExperimentConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config


def cmd_run(args) -> dict:
    config = _config(args)
    result = P.run_experiment(config, args.output_dir)
    return {"output_dir": str(result.out_dir), **result.summary}


def cmd_probe(args) -> dict:
    config = _config(args)
    ckpt = P.load_checkpoint(args.checkpoint)
    splits = P.make_splits(config)
    acc = P.linear_probe(ckpt.branches.student, splits.finetune, splits.eval, ckpt.config, layer=args.layer)
    return {"checkpoint": str(args.checkpoint), "step": ckpt.step, "probe_accuracy": acc}


def cmd_generate_data(args) -> dict:
    config = _config(args)
    dataset = synth.split(synth.generate(config.synth_config()), config.data.split, seed=config.seed)
    out = Path(args.out or Path(config.output_dir) / "data.trin")
    out.parent.mkdir(parents=True, exist_ok=True)
    synth.save(dataset, out)
    counts = {name: len(dataset.subset(name)) for name in synth.SPLIT_NAMES}
    return {"path": str(out), "sequences": len(dataset), **counts}


def cmd_diag(args) -> dict:
    ckpt = P.load_checkpoint(args.checkpoint)
    config = ckpt.config
    splits = P.make_splits(config)
    x = P.probe_batch(splits, config)
    metrics = P.diagnose(ckpt.branches, x, config, ckpt.step)
    report = {"checkpoint": str(args.checkpoint), **metrics.as_row()}
    if args.export:
        reps = P.representations(ckpt.branches.student, x, config)
        labels = synth.downsample_labels(splits.eval.frame_labels[: x.shape[0]], config.encoder.downsample_stride,
                                         config.data.num_classes)
        report["export"] = str(export_embeddings(reps, labels, args.export, dims=args.dims))
    return report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trinet", description="Triple-branch self-supervised pre-training toy.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=True):
        p.add_argument("--config", required=required, type=Path, help="experiment YAML")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        return p

    run = with_config(sub.add_parser("run", help="teacher, pre-training and probes"))
    run.add_argument("--output-dir", type=Path, default=None, help="override output_dir")
    run.set_defaults(func=cmd_run)

    probe = with_config(sub.add_parser("probe", help="linear probe on a checkpoint"))
    probe.add_argument("--checkpoint", required=True, type=Path)
    probe.add_argument("--layer", type=int, default=None, help="block index to probe (default: mid-level tap)")
    probe.set_defaults(func=cmd_probe)

    gen = with_config(sub.add_parser("generate-data", help="write the synthetic corpus"))
    gen.add_argument("--out", type=Path, default=None, help="dataset path (default: <output_dir>/data.trin)")
    gen.set_defaults(func=cmd_generate_data)

    diag = sub.add_parser("diag", help="collapse metrics for a checkpoint")
    diag.add_argument("--checkpoint", required=True, type=Path)
    diag.add_argument("--export", type=Path, default=None, help="write PCA coordinates and labels as CSV")
    diag.add_argument("--dims", type=int, default=2)
    diag.set_defaults(func=cmd_diag)
    return parser


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not serialisable: {type(obj).__name__}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        report = args.func(args)
    except ConfigError as exc:
        print(f"trinet: config error: {exc}", file=sys.stderr)
        return 2
    except P.TrainingDiverged as exc:
        print(f"trinet: training diverged: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"trinet: error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(report, indent=2, sort_keys=True, default=_jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
