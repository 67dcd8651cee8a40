"""
GZSL Lab Main Entry Point
=========================
Command-line interface for dataset generation, training, evaluation, gamma
sweeps, gradient checks, ablations and artifact export.

Exit codes: 0 success, 1 usage error, 2 validation failure,
3 numerical failure (non-finite loss or failed gradient check).
"""

import argparse
import json
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__, dataset_io
from .ablation import get_variant_list, run_ablation, run_loss_weight_sweep, run_progression
from .checkpoint import check_signature, load_checkpoint
from .config import RunConfig, settings
from .data_generator import DataGenerator
from .errors import CheckpointError, ConfigError, GzslError, NumericalError
from .evaluator import (
    Evaluator,
    affinity_frames,
    export_affinities,
    export_attribute_predictions,
    export_distributions,
)
from .gradcheck import run_gradcheck
from .presets import apply_preset, get_preset_list
from .trainer import Trainer, prepare_model
from .utils import atomic_output_dir, directory_size, format_percentage, format_size, parse_float_list, parse_int_list
from .visualizations import (
    create_affinity_heatmaps,
    create_distribution_chart,
    create_sweep_chart,
    save_html,
)

RUN_CONFIG = "run_config.json"

EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def setup_logging(log_level: str = "INFO") -> logging.Logger:
    """Set up logging configuration."""
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )
    return logging.getLogger(__name__)


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors as one line with exit code 1."""

    def error(self, message):
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_USAGE)


# =============================================================================
# CONFIGURATION
# =============================================================================

FLAG_OVERRIDES = {
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.learning_rate",
    "checkpoint_interval": "train.checkpoint_interval",
    "lambda_sem": "loss.lambda_sem",
    "lambda_deb": "loss.lambda_deb",
    "tau": "loss.tau",
    "loops": "dsvtm.loops",
    "modules": "dsvtm.modules",
    "width": "dsvtm.width",
    "backbone_mode": "backbone.mode",
}


def resolve_config(args) -> RunConfig:
    """defaults < environment < --config file < --preset < individual flags."""
    config = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "preset", None):
        config = apply_preset(config, args.preset)
    overrides = {
        dotted: getattr(args, flag, None) for flag, dotted in FLAG_OVERRIDES.items()
    }
    seed = getattr(args, "seed", None)
    if seed is not None:
        overrides["seed"] = seed
        overrides["data.seed"] = seed
    return config.with_overrides(overrides)


def banner(logger: logging.Logger, title: str) -> None:
    logger.info("=" * 70)
    logger.info(title)
    logger.info("=" * 70)
    logger.info(f"Timestamp: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")


def section(logger: logging.Logger, title: str, lines: Dict[str, object]) -> None:
    logger.info("-" * 70)
    logger.info(title)
    for key, value in lines.items():
        logger.info(f"  {key}: {value}")


def finish(logger: logging.Logger, title: str) -> None:
    logger.info("-" * 70)
    logger.info(f"{title} COMPLETED SUCCESSFULLY")
    logger.info("=" * 70)


def log_config(logger: logging.Logger, config: RunConfig) -> None:
    d = config.dsvtm
    section(logger, "CONFIGURATION", {
        "Random seed": config.seed,
        "Shape (N_s, N_v, D, N_g)": f"({d.num_attributes}, {d.num_patches}, {d.width}, {d.num_groups})",
        "Loops R / modules Z": f"{d.loops} / {d.modules}",
        "Components": (
            f"imse={d.use_imse} aca={d.use_aca} "
            f"smid_attention={d.use_smid_attention} patch_mixing={d.use_patch_mixing}"
        ),
        "Backbone": f"{config.backbone.mode}, {config.backbone.num_layers} layers",
        "Loss weights": f"lambda_sem={config.loss.lambda_sem} lambda_deb={config.loss.lambda_deb} tau={config.loss.tau}",
        "Training": (
            f"{config.train.epochs} epochs, batch {config.train.batch_size}, "
            f"lr {config.train.learning_rate}"
        ),
    })


def _load_for_inference(args):
    """Checkpoint and dataset, with the dataset shape checked against the checkpoint."""
    checkpoint = load_checkpoint(args.checkpoint)
    dataset = dataset_io.load(args.data)
    expected = checkpoint.config.with_dataset_shape(
        dataset.num_attributes, dataset.num_groups, dataset.num_patches, dataset.input_width
    )
    check_signature(checkpoint.config, expected)
    return checkpoint, dataset


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_gen_data(args, logger) -> int:
    config = resolve_config(args)
    problems = config.data.validate()
    if problems:
        raise ConfigError("; ".join(problems))
    banner(logger, "GZSL LAB - DATASET GENERATION")
    data = config.data
    section(logger, "CONFIGURATION", {
        "Preset": args.preset or "none",
        "Random seed": data.seed,
        "Classes (seen | unseen)": f"{data.num_seen} | {data.num_unseen}",
        "Attributes / groups": f"{data.num_attributes} / {data.num_groups}",
        "Patches x width": f"{data.num_patches} x {data.input_width}",
        "Renderer variants": data.variants,
        "Noise": data.noise,
        "Samples per class": data.samples_per_class,
    })

    dataset = DataGenerator(data).generate()
    stats = dataset.get_statistics()
    section(logger, "DATASET STATISTICS", {key.replace("_", " ").capitalize(): value for key, value in stats.items()})

    out = Path(args.out)
    with atomic_output_dir(out) as scratch:
        manifest = dataset_io.save(dataset, scratch)
        config.save(scratch / RUN_CONFIG)
    section(logger, "OUTPUT FILES", {
        "Dataset": out,
        "Manifest": out / manifest.name,
        "Size": format_size(directory_size(out)),
    })
    finish(logger, "DATASET GENERATION")
    return 0


def cmd_train(args, logger) -> int:
    dataset = dataset_io.load(args.data)
    config = resolve_config(args)
    config.dataset_path = str(args.data)
    config.output_dir = str(args.out)
    config, model = prepare_model(config, dataset)

    banner(logger, "GZSL LAB - TRAINING")
    log_config(logger, config)
    section(logger, "MODEL", {
        "Parameters": f"{model.num_parameters():,}",
        "Training samples": dataset.split("seen_train").size,
    })

    out = Path(args.out)
    with atomic_output_dir(out) as scratch:
        trainer = Trainer(model, dataset, config, checkpoint_dir=scratch / "checkpoints", progress=not args.quiet)
        if args.resume:
            resumed = load_checkpoint(args.resume, expected=config)
            if not resumed.optimizer_state:
                raise CheckpointError(f"checkpoint {args.resume} holds no optimizer state to resume from")
            model.load_state_dict(resumed.model.state_dict())
            trainer.optimizer.load_state_dict(resumed.optimizer_state, resumed.step)
            completed = resumed.step // trainer.batches_per_epoch
            trainer.history = [row for row in resumed.history if row.get("epoch", 0) <= completed]
            logger.info(f"Resuming from {args.resume} at step {resumed.step}")
        result = trainer.run()
        trainer.save_metrics(scratch / "metrics.csv")
        trainer.save_checkpoint(scratch / "checkpoint")
        config.save(scratch / RUN_CONFIG)

    final = result.metrics.iloc[-1] if len(result.metrics) else None
    section(logger, "RESULTS", {
        "Steps": result.steps,
        "Final loss": f"{final['total']:.4f}" if final is not None else "n/a",
        "Seen-train accuracy": format_percentage(final["seen_train_acc"]) if final is not None else "n/a",
    })
    section(logger, "OUTPUT FILES", {
        "Metrics": out / "metrics.csv",
        "Checkpoint": out / "checkpoint",
        "Config echo": out / RUN_CONFIG,
    })
    finish(logger, "TRAINING")
    return 0


def cmd_eval(args, logger) -> int:
    checkpoint, dataset = _load_for_inference(args)
    banner(logger, "GZSL LAB - EVALUATION")
    evaluator = Evaluator(checkpoint.model, dataset, tau=args.tau, progress=not args.quiet)
    if args.zsl:
        report = evaluator.evaluate_zsl()
    else:
        report = evaluator.evaluate(args.gamma, per_sample=args.per_sample)

    out = Path(args.out)
    with atomic_output_dir(out) as scratch:
        report.save(scratch / "report.json")
        checkpoint.config.save(scratch / RUN_CONFIG)
    section(logger, "RESULTS", {
        "Mode": report.mode,
        "Gamma": report.gamma,
        "U (unseen)": format_percentage(report.U),
        "S (seen)": format_percentage(report.S),
        "H": format_percentage(report.H),
    })
    section(logger, "OUTPUT FILES", {"Report": out / "report.json"})
    finish(logger, "EVALUATION")
    return 0


def cmd_sweep_gamma(args, logger) -> int:
    if args.steps < 1:
        raise argparse.ArgumentTypeError("--steps must be >= 1")
    checkpoint, dataset = _load_for_inference(args)
    banner(logger, "GZSL LAB - GAMMA SWEEP")
    gammas = np.linspace(args.gamma_from, args.gamma_to, args.steps) if args.steps > 1 else [args.gamma_from]
    evaluator = Evaluator(checkpoint.model, dataset, tau=args.tau, progress=not args.quiet)
    result = evaluator.sweep(gammas)
    best = result.best

    out = Path(args.out)
    with atomic_output_dir(out) as scratch:
        result.save(scratch / "sweep.csv")
        best.save(scratch / "best_report.json")
        checkpoint.config.save(scratch / RUN_CONFIG)
        if args.html:
            save_html(create_sweep_chart(result.to_frame(), best.gamma), scratch / "sweep.html")
    section(logger, "RESULTS", {
        "Gammas": f"{len(result.reports)} in [{args.gamma_from}, {args.gamma_to}]",
        "Best gamma": best.gamma,
        "Best H": format_percentage(best.H),
    })
    section(logger, "OUTPUT FILES", {"Sweep": out / "sweep.csv", "Best report": out / "best_report.json"})
    finish(logger, "GAMMA SWEEP")
    return 0


def cmd_gradcheck(args, logger) -> int:
    config = resolve_config(args)
    banner(logger, "GZSL LAB - GRADIENT CHECK")
    section(logger, "CONFIGURATION", {
        "Backbone": "toy encoder" if args.full else "identity",
        "Step h": args.h,
        "Threshold": args.threshold,
    })
    report = run_gradcheck(config, full=args.full, h=args.h, threshold=args.threshold)

    out = Path(args.out)
    with atomic_output_dir(out) as scratch:
        report.save(scratch / "gradcheck.json")
        config.save(scratch / RUN_CONFIG)
    section(logger, "RESULTS", {
        "Tensors checked": len(report.parameters),
        "Max relative error": f"{report.max_rel_error:.3e}",
        "Accepted by abs_tol": report.tolerated,
        "Passed": report.passed,
    })
    section(logger, "OUTPUT FILES", {"Report": out / "gradcheck.json"})
    if not report.passed:
        failing = [name for name, p in report.parameters.items() if not p.passed]
        raise NumericalError(f"gradient check failed for {len(failing)} tensors: {', '.join(failing[:5])}")
    finish(logger, "GRADIENT CHECK")
    return 0


def cmd_export_attn(args, logger) -> int:
    checkpoint, dataset = _load_for_inference(args)
    banner(logger, "GZSL LAB - AFFINITY EXPORT")
    out = Path(args.out)
    with atomic_output_dir(out) as scratch:
        written = export_affinities(checkpoint.model, dataset, args.sample, scratch)
        if args.html:
            frames = affinity_frames(checkpoint.model, dataset, args.sample)
            save_html(create_affinity_heatmaps(frames, args.sample), scratch / "affinities.html")
        checkpoint.config.save(scratch / RUN_CONFIG)
    section(logger, "OUTPUT FILES", {path.name: out / path.name for path in written})
    finish(logger, "AFFINITY EXPORT")
    return 0


def cmd_export_dist(args, logger) -> int:
    checkpoint, dataset = _load_for_inference(args)
    banner(logger, "GZSL LAB - DISTRIBUTION EXPORT")
    out = Path(args.out)
    evaluator = Evaluator(checkpoint.model, dataset, tau=args.tau, progress=not args.quiet)
    with atomic_output_dir(out) as scratch:
        written = export_distributions(checkpoint.model, dataset, scratch, evaluator=evaluator)
        if args.html:
            summary = json.loads(written["summary"].read_text(encoding="utf-8"))
            chart = create_distribution_chart(evaluator.distributions(), summary)
            save_html(chart, scratch / "distributions.html")
        checkpoint.config.save(scratch / RUN_CONFIG)
    section(logger, "OUTPUT FILES", {name: out / path.name for name, path in written.items()})
    finish(logger, "DISTRIBUTION EXPORT")
    return 0


def cmd_export_attributes(args, logger) -> int:
    checkpoint, dataset = _load_for_inference(args)
    banner(logger, "GZSL LAB - ATTRIBUTE PREDICTION EXPORT")
    out = Path(args.out)
    with atomic_output_dir(out) as scratch:
        written = export_attribute_predictions(checkpoint.model, dataset, scratch)
        checkpoint.config.save(scratch / RUN_CONFIG)
    section(logger, "OUTPUT FILES", {name: out / path.name for name, path in written.items()})
    finish(logger, "ATTRIBUTE PREDICTION EXPORT")
    return 0


def cmd_ablate(args, logger) -> int:
    dataset = dataset_io.load(args.data)
    config = resolve_config(args)
    config.dataset_path = str(args.data)
    variants = args.variants.split(",") if args.variants else get_variant_list()
    unknown = sorted(set(variants) - set(get_variant_list()))
    if unknown:
        raise ConfigError(f"unknown ablation variants: {unknown}")
    prepare_model(config, dataset)
    progression_grid = None
    if args.grid_r or args.grid_z:
        progression_grid = (
            parse_int_list(args.grid_r) if args.grid_r else [config.dsvtm.loops],
            parse_int_list(args.grid_z) if args.grid_z else [config.dsvtm.modules],
        )
    weight_grid = None
    if args.grid_lambda_sem or args.grid_lambda_deb:
        weight_grid = (
            parse_float_list(args.grid_lambda_sem) if args.grid_lambda_sem else [config.loss.lambda_sem],
            parse_float_list(args.grid_lambda_deb) if args.grid_lambda_deb else [config.loss.lambda_deb],
        )

    banner(logger, "GZSL LAB - ABLATION")
    log_config(logger, config)
    section(logger, "VARIANTS", {"Components": ", ".join(variants)})

    out = Path(args.out)
    with atomic_output_dir(out) as scratch:
        progress = not args.quiet
        ablation = run_ablation(config, dataset, variants, args.gamma_steps, progress=progress)
        ablation.to_csv(scratch / "ablation.csv", index=False, float_format="%.17g")
        if progression_grid:
            progression = run_progression(config, dataset, *progression_grid, args.gamma_steps, progress=progress)
            progression.to_csv(scratch / "progression.csv", index=False, float_format="%.17g")
        if weight_grid:
            weights = run_loss_weight_sweep(config, dataset, *weight_grid, args.gamma_steps, progress=progress)
            weights.to_csv(scratch / "loss_weights.csv", index=False, float_format="%.17g")
        config.save(scratch / RUN_CONFIG)

    logger.info("-" * 70)
    logger.info("RESULTS")
    for row in ablation.itertuples(index=False):
        logger.info(
            f"  {row.variant:<10} U={format_percentage(row.U)} S={format_percentage(row.S)} "
            f"H={format_percentage(row.H)} (gamma={row.gamma:.3f})"
        )
    files = {"Ablation": out / "ablation.csv"}
    if progression_grid:
        files["Progression"] = out / "progression.csv"
    if weight_grid:
        files["Loss weights"] = out / "loss_weights.csv"
    section(logger, "OUTPUT FILES", files)
    finish(logger, "ABLATION")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-gamma": cmd_sweep_gamma,
    "gradcheck": cmd_gradcheck,
    "export-attn": cmd_export_attn,
    "export-dist": cmd_export_dist,
    "export-attributes": cmd_export_attributes,
    "ablate": cmd_ablate,
}


# =============================================================================
# PARSER
# =============================================================================

def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", "-c", type=str, default=None, help="JSON run config file")
    parser.add_argument("--seed", "-s", type=int, default=None, help="Random seed for reproducibility")
    parser.add_argument("--epochs", type=int, default=None, help="Training epochs")
    parser.add_argument("--batch-size", type=int, default=None, help="Samples per batch")
    parser.add_argument("--lr", type=float, default=None, help="Adam learning rate")
    parser.add_argument("--checkpoint-interval", type=int, default=None,
                        help="Epochs between checkpoints (0 = final only)")
    parser.add_argument("--lambda-sem", type=float, default=None, help="Weight of the alignment loss")
    parser.add_argument("--lambda-deb", type=float, default=None, help="Weight of the debiasing loss")
    parser.add_argument("--tau", type=float, default=None, help="Cosine score scale")
    parser.add_argument("--loops", type=int, default=None, help="IMSE loops per module (R)")
    parser.add_argument("--modules", type=int, default=None, help="Cascaded DSVTMs (Z)")
    parser.add_argument("--width", type=int, default=None, help="Model width (D)")
    parser.add_argument("--backbone-mode", choices=["toy-encoder", "identity"], default=None,
                        help="Backbone in front of the DSVTMs")


def _add_inference_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", required=True, help="Checkpoint directory")
    parser.add_argument("--data", required=True, help="Dataset directory")
    parser.add_argument("--out", "-o", required=True, help="Output directory")
    parser.add_argument("--tau", type=float, default=None, help="Cosine score scale (default: trained value)")


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(
        prog="gzsl_lab",
        description="Generalized zero-shot learning lab with progressive semantic-visual mutual adaption",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
    python -m gzsl_lab.main gen-data --preset toy --out runs/toy-data
    python -m gzsl_lab.main train --data runs/toy-data --epochs 50 --out runs/toy-train
    python -m gzsl_lab.main eval --checkpoint runs/toy-train/checkpoint --data runs/toy-data --gamma 4 --out runs/eval
    python -m gzsl_lab.main sweep-gamma --checkpoint runs/toy-train/checkpoint --data runs/toy-data --from 0 --to 20 --steps 41 --out runs/sweep
    python -m gzsl_lab.main gradcheck --full --out runs/gradcheck
    python -m gzsl_lab.main ablate --data runs/toy-data --grid-r 1,2,3 --grid-z 1,2 --out runs/ablation
        """
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--log-level",
        type=str,
        default=settings.log_level.upper(),
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging level"
    )
    parser.add_argument("--quiet", "-q", action="store_true", help="Disable progress bars")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=CliParser)
    sub.required = True

    gen = sub.add_parser("gen-data", help="Generate a synthetic GZSL dataset")
    gen.add_argument("--config", "-c", type=str, default=None, help="JSON run config file")
    gen.add_argument("--preset", choices=get_preset_list(), default=None, help="Benchmark-shaped preset")
    gen.add_argument("--seed", "-s", type=int, default=None, help="Random seed for reproducibility")
    gen.add_argument("--out", "-o", required=True, help="Output dataset directory")

    train = sub.add_parser("train", help="Train a model on a dataset")
    train.add_argument("--data", required=True, help="Dataset directory")
    train.add_argument("--out", "-o", required=True, help="Output run directory")
    train.add_argument("--resume", default=None, help="Checkpoint directory to resume from")
    _add_run_flags(train)

    ev = sub.add_parser("eval", help="Evaluate a checkpoint at one gamma")
    _add_inference_flags(ev)
    ev.add_argument("--gamma", type=float, default=0.0, help="Calibration subtracted from seen scores")
    ev.add_argument("--zsl", action="store_true", help="Conventional ZSL on the unseen classes only")
    ev.add_argument("--per-sample", action="store_true", help="Average over samples instead of classes")

    sweep = sub.add_parser("sweep-gamma", help="Evaluate a checkpoint over a gamma grid")
    _add_inference_flags(sweep)
    sweep.add_argument("--from", dest="gamma_from", type=float, default=0.0, help="First gamma")
    sweep.add_argument("--to", dest="gamma_to", type=float, default=settings.tau, help="Last gamma")
    sweep.add_argument("--steps", type=int, default=41, help="Number of gammas")
    sweep.add_argument("--html", action="store_true", help="Also write sweep.html")

    grad = sub.add_parser("gradcheck", help="Finite-difference check of every parameter gradient")
    _add_run_flags(grad)
    grad.add_argument("--full", action="store_true", help="Include the toy backbone encoder")
    grad.add_argument("--h", type=float, default=1e-5, help="Central-difference step")
    grad.add_argument("--threshold", type=float, default=1e-4, help="Maximum relative error")
    grad.add_argument("--out", "-o", required=True, help="Output directory")

    attn = sub.add_parser("export-attn", help="Export per-(module, loop) affinity matrices")
    _add_inference_flags(attn)
    attn.add_argument("--sample", type=int, required=True, help="Sample index")
    attn.add_argument("--html", action="store_true", help="Also write affinities.html")

    dist = sub.add_parser("export-dist", help="Export seen/unseen score distributions")
    _add_inference_flags(dist)
    dist.add_argument("--html", action="store_true", help="Also write distributions.html")

    attrs = sub.add_parser("export-attributes", help="Export predicted attribute vectors")
    _add_inference_flags(attrs)

    ablate = sub.add_parser("ablate", help="Component ablation, R/Z progression and loss-weight grid")
    ablate.add_argument("--data", required=True, help="Dataset directory")
    ablate.add_argument("--out", "-o", required=True, help="Output directory")
    ablate.add_argument("--variants", default=None, help=f"Comma-separated subset of {','.join(get_variant_list())}")
    ablate.add_argument("--grid-r", default=None, help="Comma-separated loop counts, e.g. 1,2,3")
    ablate.add_argument("--grid-z", default=None, help="Comma-separated module counts, e.g. 1,2")
    ablate.add_argument("--grid-lambda-sem", default=None, help="Comma-separated lambda_sem values, e.g. 0,0.5,1")
    ablate.add_argument("--grid-lambda-deb", default=None, help="Comma-separated lambda_deb values, e.g. 0,0.001,0.01")
    ablate.add_argument("--gamma-steps", type=int, default=41, help="Gamma grid size for best-H selection")
    _add_run_flags(ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the GZSL lab."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logger = setup_logging(args.log_level)

    try:
        return COMMANDS[args.command](args, logger)
    except NumericalError as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_NUMERICAL
    except argparse.ArgumentTypeError as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_USAGE
    except (GzslError, OSError) as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
