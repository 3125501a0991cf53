"""Command line entry point: ``wsihyb gen | train | eval``.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, PipelineConfig, coerce_values, load_pipeline_config, parse_key_values
from .engine import DataError, Dataset
from .evaluation import MetricError, compute_metrics, emit_report, report_row, roc_curve
from .labels import LabelError, RepositoryFormatError
from .pipeline import Pipeline, PipelineError, PoolExhausted, RoundState
from .scorer import CheckpointError, FeatureSpecError, TrainingDiverged, load_checkpoint
from .slides import SlideFormatError
from .synth import GenConfig, GenerationError, generate_synthetic_dataset, manifest_digest

log = logging.getLogger("wsihyb")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MODE_NAMES = {"hybrid": "hybrid", "pixel": "pixel_only", "image": "image_only"}
MODEL_FILE = "model.json"
LOCK_FILE = "run.lock"

_DATA_ERRORS = (DataError, SlideFormatError, RepositoryFormatError, CheckpointError, FeatureSpecError,
                LabelError, GenerationError, PipelineError, PoolExhausted, MetricError, OSError)


class UsageError(ValueError):
    pass


class NumericalFailure(ArithmeticError):
    pass


def versions():
    return {"wsihyb": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def write_lock(out_dir, command, argv, seed, config_text=None, config_digest=None, dataset_digest=None):
    """Record what is needed to reproduce a run bit for bit."""
    lock = {"command": command, "argv": list(argv), "seed": seed, "config_digest": config_digest,
            "config": config_text, "dataset_digest": dataset_digest, "versions": versions()}
    path = Path(out_dir) / LOCK_FILE
    path.write_text(json.dumps(lock, indent=1, sort_keys=True) + "\n")
    return path


def _overrides(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, value = (p.strip() for p in pair.split("=", 1))
        out[key] = value
    known = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(out) - known)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    return coerce_values(PipelineConfig, out)


def _pipeline_config(args):
    overrides = _overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    return load_pipeline_config(args.config, overrides=overrides)


def cmd_gen(args, argv):
    known = {f.name for f in fields(GenConfig)} - {"background", "benign", "distractor", "lesion"}
    values = {}
    if args.config is not None:
        raw = parse_key_values(Path(args.config).read_text(), known, str(args.config))
        values.update(coerce_values(GenConfig, raw))
    flags = {"n_slides": args.slides, "positive_fraction": args.pos_frac, "extent": args.extent,
             "n_fine_patches": args.fine_patches}
    values.update({k: v for k, v in flags.items() if v is not None})
    cfg = GenConfig(**values)
    if not 0 <= cfg.positive_fraction <= 1:
        raise UsageError(f"--pos-frac must be in [0, 1], got {cfg.positive_fraction}")
    if cfg.n_slides < 1 or cfg.extent < 1 or cfg.n_fine_patches < 0:
        raise UsageError("--slides and --extent must be positive, --fine-patches non-negative")
    out = Path(args.out)
    generate_synthetic_dataset(cfg, args.seed, out)
    digest = manifest_digest(out)
    write_lock(out, "gen", argv, args.seed, json.dumps(cfg.to_dict(), sort_keys=True), None, digest)
    print(f"dataset {out} digest {digest}")
    return EXIT_OK


def cmd_train(args, argv):
    config = _pipeline_config(args)
    mode = MODE_NAMES[args.mode]
    dataset = Dataset.load(args.data, load_fine=mode != "image_only")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_lock(out, "train", argv, config.seed, config.to_text(), config.digest(), dataset.digest)
    result = Pipeline(dataset, config, out).run(mode)
    best = result.best
    model = {"mode": mode, "selected_round": best.round, "seed": config.seed,
             "config": config.to_text(exclude=("workers",)), "config_digest": config.digest(),
             "dataset_digest": dataset.digest,
             "stage2_losses": [h.stage2_loss for h in result.history],
             "scorer": best.checkpoints.get("scorer"), "classifier": best.checkpoints.get("classifier")}
    (out / MODEL_FILE).write_text(json.dumps(model, indent=1, sort_keys=True) + "\n")
    print(f"{mode}: selected round {best.round}, stage-2 loss {best.stage2_loss:.6f}")
    return EXIT_OK


def load_model(model_dir):
    """(model record, RoundState) from a ``train`` output directory."""
    model_dir = Path(model_dir)
    try:
        model = json.loads((model_dir / MODEL_FILE).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {model_dir / MODEL_FILE}: {exc}") from exc
    scorer = load_checkpoint(model_dir / model["scorer"]) if model.get("scorer") else None
    classifier = load_checkpoint(model_dir / model["classifier"])
    return model, RoundState(model["selected_round"], scorer, classifier, float("nan"))


def cmd_eval(args, argv):
    dataset = Dataset.load(args.data, load_fine=False)
    rows, curves, seeds = [], {}, []
    for model_dir in args.model:
        model, state = load_model(model_dir)
        known = {f.name for f in fields(PipelineConfig)}
        config = PipelineConfig(**coerce_values(PipelineConfig, parse_key_values(model["config"], known)))
        if args.workers is not None:
            config = config.replace(workers=args.workers)
        scores = Pipeline(dataset, config).score_split(state, "test")
        metrics = compute_metrics(scores)
        values = (metrics.sensitivity, metrics.specificity, metrics.auc, metrics.threshold)
        if not all(math.isfinite(v) for v in values):
            raise NumericalFailure(f"non-finite metric for model {model_dir}: {metrics}")
        rows.append(report_row(model["mode"], model["selected_round"], metrics, model["seed"]))
        name = model["mode"]
        if name in curves:
            name = f"{name}_seed{model['seed']}"
        curves[name] = roc_curve(scores)
        seeds.append(model["seed"])
        print(f"{model['mode']} seed {model['seed']}: sensitivity {metrics.sensitivity:.4f} "
              f"specificity {metrics.specificity:.4f} auc {metrics.auc:.4f} threshold {metrics.threshold:.6g}")
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    emit_report(rows, report, curves, args.svg)
    write_lock(report.parent, "eval", argv, seeds[0] if len(set(seeds)) == 1 else seeds,
               dataset_digest=dataset.digest)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="wsihyb", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic slide dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--slides", type=int)
    gen.add_argument("--pos-frac", type=float, help="fraction of positive slides (default 0.1)")
    gen.add_argument("--extent", type=int, help="slide width and height in pixels")
    gen.add_argument("--fine-patches", type=int)
    gen.add_argument("--config", help="key = value generator settings")
    gen.set_defaults(func=cmd_gen)

    train = sub.add_parser("train", help="train one supervision mode")
    train.add_argument("--data", required=True)
    train.add_argument("--mode", choices=sorted(MODE_NAMES), default="hybrid")
    train.add_argument("--config", help="key = value pipeline settings")
    train.add_argument("--out", required=True)
    train.add_argument("--seed", type=int)
    train.add_argument("--workers", type=int)
    train.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score the test split and write a metrics report")
    ev.add_argument("--model", action="append", required=True, help="train output directory (repeatable)")
    ev.add_argument("--data", required=True)
    ev.add_argument("--report", required=True)
    ev.add_argument("--svg")
    ev.add_argument("--workers", type=int)
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, argv)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
