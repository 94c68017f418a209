"""
cli.py
Command-line entry point: data generation, training, evaluation and analysis
"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from analysis.metrics import (
    RAW_TAP, bias_histogram, depth_profile, param_report, rank_report,
    write_histogram_csv, write_param_csv, write_rank_csv,
)
from analysis.report_template import (
    build_eval_summary, build_histogram_table, build_param_line,
    build_profile_table, build_rank_table,
)
from engine.grad_check import DEFAULT_STEP, DEFAULT_TOLERANCE, GradCheckReport, finite_diff_check
from engine.tensor import Tensor
from models.backbone import build_lma
from models.task import Batch, classification_loss
from synth.dataset import load_dataset_config, load_dataset_split, make_dataset, write_previews
from train_pipeline import RESUME_LATEST, evaluate, load_trained_model, train
from utils.config import load_run_config, setup_logging
from utils.data_model import FeatureSource, ModelMode
from utils.errors import CheckpointError, ConfigError, DatasetFormatError, LMAError

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATASET = 4
EXIT_CHECKPOINT = 5
EXIT_OTHER = 6
EXIT_FILE = 7


def cmd_gen_data(args) -> int:
    config = load_dataset_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    print("\n" + "=" * 60)
    print("GENERATING SYNTHETIC DATASET")
    print("=" * 60)
    written = make_dataset(config, args.out, overwrite=args.overwrite, splits=args.split, quiet=args.quiet)
    for path in written:
        print(f"Wrote {path}")
    if args.preview:
        first = load_dataset_split(str(written[0]), "")
        previews = write_previews(first, str(Path(args.out) / "preview"), args.preview)
        print(f"Wrote {len(previews)} previews to {Path(args.out) / 'preview'}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {
        "mode": args.mode,
        "rank_fixed": args.r,
        "epochs": args.epochs,
        "seed": args.seed,
        "dataset_path": args.dataset,
        "optimizer": args.optimizer,
        "quiet": True if args.quiet else None,
    }
    config = load_run_config(args.config, overrides)
    result = train(config, output_dir=args.out, resume=args.resume)
    print(build_param_line(param_report(result.model)))
    return EXIT_OK


def cmd_eval(args) -> int:
    result = evaluate(args.checkpoint, split=args.split, dataset_path=args.dataset)
    print(build_eval_summary(result.accuracy, result.per_class, result.split))
    return EXIT_OK


def _analysis_inputs(args):
    model = None
    dataset_path = args.dataset
    if args.checkpoint:
        config, model = load_trained_model(args.checkpoint)
        dataset_path = dataset_path or config.dataset_path
    if dataset_path is None:
        raise ConfigError(["--dataset is required without --checkpoint"])
    return model, load_dataset_split(dataset_path, args.split)


def cmd_analyze_bias(args) -> int:
    source = FeatureSource(args.source)
    if source != FeatureSource.RAW_INPUT and not args.checkpoint:
        raise ConfigError([f"--source {source.value} needs --checkpoint"])
    model, dataset = _analysis_inputs(args)
    taps = [RAW_TAP] if source == FeatureSource.RAW_INPUT else (args.tap or sorted(model.config.taps))
    histograms = [bias_histogram(model, dataset, tap, source, max_samples=args.max_samples) for tap in taps]
    for histogram in histograms:
        print(build_histogram_table(histogram))
    if args.csv:
        write_histogram_csv(histograms, args.csv)
        print(f"Wrote {args.csv}")
    return EXIT_OK


def cmd_depth_profile(args) -> int:
    model, dataset = _analysis_inputs(args)
    profile = depth_profile(model, dataset, args.source, max_samples=args.max_samples)
    print(build_profile_table(profile))
    return EXIT_OK


def cmd_rank_report(args) -> int:
    config, model = load_trained_model(args.checkpoint)
    report = rank_report(model, r_init=config.r_init, r_target=config.r_target)
    print(build_rank_table(report))
    if args.csv:
        write_rank_csv(report, args.csv)
        print(f"Wrote {args.csv}")
    return EXIT_OK


def cmd_param_report(args) -> int:
    if args.checkpoint:
        _, model = load_trained_model(args.checkpoint)
        reports = [param_report(model)]
    else:
        config = load_run_config(args.config)
        rank = config.model_rank() if config.mode in (ModelMode.LMA_ADAPTIVE, ModelMode.LMA_FIXED) else config.r_target
        if args.r is not None:
            rank = args.r
        reports = [
            param_report(config.backbone, ModelMode.LMA_FIXED, rank),
            param_report(config.backbone, ModelMode.TWO_STREAM),
            param_report(config.backbone, ModelMode.UNIMODAL),
        ]
    for report in reports:
        print(build_param_line(report))
    if args.csv:
        write_param_csv(reports, args.csv)
        print(f"Wrote {args.csv}")
    return EXIT_OK


def run_grad_check(config, seed: int = 0, batch: int = 2, size: int = 8, step: float = DEFAULT_STEP,
                   max_entries: Optional[int] = None) -> GradCheckReport:
    """
    Finite-difference check of every parameter of a seeded LMA: shared kernels
    and biases, P, Lambda, Q of every adaptor and the head, through the fused
    forward and the cross-entropy loss.
    """
    rank = config.model_rank() or config.backbone.rank
    model = build_lma(config.backbone, rank, seed=seed)
    rng = np.random.default_rng(seed)
    # Zero Lambda would hide P and Q from the loss
    for _, adaptor in model.adaptor_entries():
        adaptor.Lambda.data = rng.normal(0.0, 1.0, size=adaptor.rank)
    shape = (batch, config.backbone.in_channels, size, size)
    sample = Batch(
        xs=[rng.normal(size=shape) for _ in model.modalities],
        labels=rng.integers(0, config.backbone.num_classes, size=batch),
    )
    return finite_diff_check(
        lambda: classification_loss(model, sample)[0], model.parameters(),
        step=step, max_entries_per_param=max_entries, seed=seed,
    )


def cmd_grad_check(args) -> int:
    report = run_grad_check(
        load_run_config(args.config), seed=args.seed, batch=args.batch, size=args.size,
        step=args.step, max_entries=args.max_entries,
    )
    worst = report.worst
    print(f"Checked {len(report.entries)} tensors, {sum(e.checked_entries for e in report.entries)} entries")
    print(f"Max relative error: {report.max_relative_error:.3e} ({worst.name} {worst.worst_index})")
    if report.passed(args.tolerance):
        print(f"PASSED (tolerance {args.tolerance:g})")
        return EXIT_OK
    for entry in report.failures(args.tolerance):
        print(f"  {entry.name}{list(entry.worst_index)}: {entry.relative_error:.3e}")
    print(f"FAILED (tolerance {args.tolerance:g})")
    return EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lma",
        description="Low-rank modal adaptors: synthetic data, training and analysis",
    )
    parser.add_argument("--log-level", default=None, help="overrides LMA_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    p.add_argument("--config", required=True, help="dataset config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--split", action="append", help="only write this split (repeatable)")
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--preview", type=int, default=0, help="write N PNG previews of the first split")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--mode", choices=[m.value for m in ModelMode])
    p.add_argument("--r", type=int, help="adaptor rank for lma_fixed")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset", help="dataset directory or split file")
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--out", help="run output directory")
    p.add_argument("--resume", nargs="?", const=RESUME_LATEST,
                   help="checkpoint to continue from; without a path, the newest one under --out")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--dataset")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-bias", help="|rho| histograms between modality features")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--split", default="val")
    p.add_argument("--tap", action="append", help="tap name (repeatable; default all)")
    p.add_argument("--source", default="shared_path", choices=[s.value for s in FeatureSource])
    p.add_argument("--max-samples", type=int)
    p.add_argument("--csv", help="write plot-ready CSV")
    p.set_defaults(func=cmd_analyze_bias)

    p = sub.add_parser("depth-profile", help="heterogeneity per tap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--split", default="val")
    p.add_argument("--source", default="two_stream", choices=[s.value for s in FeatureSource])
    p.add_argument("--max-samples", type=int)
    p.set_defaults(func=cmd_depth_profile)

    p = sub.add_parser("rank-report", help="average active rank per block")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_rank_report)

    p = sub.add_parser("param-report", help="parameter increment over the unimodal model")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--config")
    source.add_argument("--checkpoint")
    p.add_argument("--r", type=int, help="adaptor rank (default: the config's)")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_param_report)

    p = sub.add_parser("grad-check", help="finite-difference check of every parameter gradient")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--size", type=int, default=8, help="input height and width")
    p.add_argument("--step", type=float, default=DEFAULT_STEP)
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--max-entries", type=int, default=16, help="entries checked per tensor")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetFormatError as e:
        print(f"Dataset error: {e}", file=sys.stderr)
        return EXIT_DATASET
    except CheckpointError as e:
        print(f"Checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except LMAError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_OTHER
    except (FileNotFoundError, FileExistsError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_FILE


if __name__ == "__main__":
    sys.exit(main())
