"""
Command-line surface:

    python -m connlearn synth | pretrain | finetune | export-graph | export-prior | gradcheck | ablate

Results go to files; status and errors go to stderr.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import torch

from connlearn.config import LOG_LEVEL, build_config
from connlearn.errors import ConnLearnError, UsageError
from connlearn.gradcheck import SCALES, run_gradcheck
from connlearn.learner import VIEWS
from connlearn.pipeline import make_batch, prepare_subjects
from connlearn.priors import compute_priors
from connlearn.signals import build_manifest, synth_generate, zscore_rows
from connlearn.storage.checkpoint import (
    checkpoint_from_pipeline,
    load_checkpoint,
    pipeline_from_checkpoint,
    save_checkpoint,
)
from connlearn.storage.datasets import load_dataset, write_dataset, write_matrix_csv
from connlearn.storage.files import write_json
from connlearn.storage.prior_cache import PriorCache
from connlearn.train import ABLATION_VARIANTS, finetune, pretrain, run_ablation

logger = logging.getLogger("connlearn")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# flag dest -> TrainConfig field
CONFIG_FLAGS = {
    "epochs": int,
    "finetune_epochs": int,
    "batch_size": int,
    "lr": float,
    "weight_decay": float,
    "seed": int,
    "iterations": int,
    "heads": int,
    "states": int,
    "hidden": int,
    "alpha": float,
    "beta": float,
    "gamma": float,
    "tau": float,
    "te_bins": int,
    "te_lag": int,
    "threads": int,
    "folds": int,
    "finetune_ratio": float,
}


def setup_logging(level: str, quiet: bool = False) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("connlearn")
    root.handlers[:] = [handler]
    root.setLevel("WARNING" if quiet else level)
    root.propagate = False


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON file with TrainConfig fields")
    for dest, kind in CONFIG_FLAGS.items():
        p.add_argument("--" + dest.replace("_", "-"), dest=dest, type=kind, default=None)
    p.add_argument("--learner-mode", dest="learner_mode", choices=["adaptive", "frozen", "fixed"], default=None)
    p.add_argument(
        "--similarity", choices=["cosine", "inner_product", "euclidean", "absolute"], default=None
    )
    p.add_argument("--cache-dir", dest="cache_dir", default=None)
    p.add_argument("--debug-checks", dest="debug_checks", action="store_true", default=None)
    p.add_argument("--log-wall-time", dest="log_wall_time", action="store_true", default=None)


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    names = list(CONFIG_FLAGS) + ["learner_mode", "similarity", "cache_dir", "debug_checks", "log_wall_time"]
    return {name: getattr(args, name, None) for name in names}


def _progress(args: argparse.Namespace) -> Optional[bool]:
    return False if args.quiet else None


def cmd_synth(args: argparse.Namespace) -> int:
    dataset = synth_generate(
        n_subjects=args.subjects,
        n_regions=args.rois,
        n_timepoints=args.timepoints,
        n_classes=args.classes,
        coupling_strength=args.coupling,
        noise_std=args.noise,
        seed=args.seed,
        template_seed=args.template_seed,
        labeled=False if args.unlabeled else None,
        name=args.name,
    )
    write_dataset(dataset, args.out)
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    config = build_config(args.config, _overrides(args))
    dataset = load_dataset(args.data)
    log_path = args.log or args.out.with_name(f"{args.out.name}-train.jsonl")
    outcome = pretrain(dataset, config, log_path=log_path, progress=_progress(args))
    save_checkpoint(outcome.checkpoint({"dataset": dataset.name, "n_subjects": len(dataset.subjects)}), args.out)
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.ckpt) if args.ckpt else None
    if checkpoint is None and not args.from_scratch:
        raise UsageError("finetune needs --ckpt, or --from-scratch to train every stage on the labeled folds")
    if checkpoint is not None and checkpoint.manifest.stage != "pretrained":
        raise UsageError(f"{args.ckpt} has stage {checkpoint.manifest.stage!r}; fine-tuning starts from a pretrained checkpoint")
    base = checkpoint.manifest.config if checkpoint is not None else None
    config = build_config(args.config, _overrides(args), base=base)
    dataset = load_dataset(args.data)
    outcome = finetune(dataset, config, checkpoint, folds=args.folds, progress=_progress(args))
    write_json(args.out, outcome.results.model_dump(mode="json"))
    if args.save_folds:
        for fold, pipeline in enumerate(outcome.pipelines):
            ckpt = checkpoint_from_pipeline(pipeline, "finetuned", {"dataset": dataset.name, "fold": fold})
            save_checkpoint(ckpt, args.save_folds / f"fold-{fold}")
    for metric, summary in outcome.results.aggregate.items():
        logger.info("%s: %s", metric.upper(), summary.formatted)
    return EXIT_OK


def cmd_export_graph(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    config = checkpoint.config()
    iteration = config.iterations if args.iteration is None else args.iteration
    if not 0 <= iteration <= config.iterations:
        raise UsageError(f"--iteration must lie in [0, {config.iterations}], got {iteration}")
    pipeline = pipeline_from_checkpoint(checkpoint, config)
    dataset = load_dataset(args.data)
    record = dataset.subject(args.subject)
    single = build_manifest(dataset.name, [record], labeled=False)
    with torch.no_grad():
        forward = pipeline(make_batch(prepare_subjects(single, config)))
    matrix = forward.graphs[args.view][iteration].values[0].numpy()
    write_matrix_csv(args.out, matrix)
    logger.info("Exported %s A^%d of %s to %s", args.view, iteration, args.subject, args.out)
    return EXIT_OK


def cmd_export_prior(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    bold = dataset.subject(args.subject).bold
    if not args.raw:
        bold = zscore_rows(bold)
    pearson, te = compute_priors(bold, args.bins, args.lag)
    write_matrix_csv(args.out, (pearson if args.kind == "pearson" else te).values)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    reports = run_gradcheck(seed=args.seed, scale=args.scale, corrupt=args.corrupt, terms=args.terms)
    if args.out:
        write_json(args.out, {"scale": args.scale, "seed": args.seed, "reports": [r.model_dump() for r in reports]})
    failed = [f"{r.objective}:{name}" for r in reports for name in r.failures()]
    if failed:
        logger.error("Gradient check failed for %s", ", ".join(failed))
        return EXIT_FAILURE
    logger.info("Gradient check passed (%d objectives)", len(reports))
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = build_config(args.config, _overrides(args))
    report = run_ablation(
        load_dataset(args.pretrain_data),
        load_dataset(args.data),
        config,
        seeds=args.seeds,
        variants=args.variants,
        progress=_progress(args),
    )
    write_json(args.out, report.model_dump(mode="json"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="connlearn", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--log-level", default=LOG_LEVEL, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--quiet", action="store_true", help="Warnings only, no progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Generate a synthetic VAR(1) dataset")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--rois", type=int, required=True)
    p.add_argument("--timepoints", type=int, required=True)
    p.add_argument("--classes", type=int, default=2, choices=[1, 2])
    p.add_argument("--coupling", type=float, default=0.6)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--template-seed", dest="template_seed", type=int, default=None)
    p.add_argument("--unlabeled", action="store_true")
    p.add_argument("--name", default="synthetic")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("pretrain", help="Contrastive pretraining on an unlabeled dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="Checkpoint directory")
    p.add_argument("--log", type=Path, default=None, help="Training log (JSON lines)")
    _add_config_flags(p)
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("finetune", help="k-fold fine-tuning and evaluation")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, default=None)
    p.add_argument("--from-scratch", dest="from_scratch", action="store_true")
    p.add_argument("--out", type=Path, required=True, help="Results JSON")
    p.add_argument("--save-folds", dest="save_folds", type=Path, default=None)
    _add_config_flags(p)
    p.set_defaults(handler=cmd_finetune)

    p = sub.add_parser("export-graph", help="Write a learned connectivity matrix as CSV")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--view", choices=list(VIEWS), default="fc")
    p.add_argument("--iteration", type=int, default=None, help="Defaults to the final iteration")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_export_graph)

    p = sub.add_parser("export-prior", help="Write a subject's Pearson or transfer-entropy prior as CSV")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--kind", choices=["pearson", "transfer_entropy"], default="pearson")
    p.add_argument("--bins", type=int, default=8)
    p.add_argument("--lag", type=int, default=1)
    p.add_argument("--raw", action="store_true", help="Skip row standardization")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_export_prior)

    p = sub.add_parser("gradcheck", help="Finite-difference check of every trainable gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", choices=sorted(SCALES), default="desk")
    p.add_argument("--terms", action="store_true", help="Also check each loss term on its own")
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("ablate", help="Pretrain + fine-tune each variant over several seeds")
    p.add_argument("--pretrain-data", dest="pretrain_data", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--variants", nargs="+", choices=sorted(ABLATION_VARIANTS), default=list(ABLATION_VARIANTS))
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # argparse already printed the usage message
        return EXIT_USAGE if e.code else EXIT_OK
    setup_logging(args.log_level, args.quiet)
    try:
        return args.handler(args)
    except UsageError as e:
        logger.error("%s", e)
        return EXIT_USAGE
    except (ConnLearnError, OSError) as e:
        logger.error("%s", e)
        return EXIT_FAILURE
