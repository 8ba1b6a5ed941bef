"""Command-line entry point: ``deepgp {train,predict,evaluate,check-grads}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointData, CheckpointError, read_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import DataError, load_csv, load_features, write_csv
from .gradcheck import check_gradients
from .model import Standardizer, build_model, elbo, mixture_metrics, predict
from .training import (
    CSVLogger,
    ModelCheckpoint,
    Trainer,
    TrainingDiverged,
    default_callbacks,
    fit,
    make_rng,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("deepgp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deepgp", description="Deep Gaussian processes with doubly stochastic variational inference.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="fit a model described by a config file")
    p.add_argument("--config", required=True, type=Path)

    p = sub.add_parser("predict", help="write predictive means and variances")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--samples", type=int, default=None, help="MC propagations (default: eval_samples from training)")

    p = sub.add_parser("evaluate", help="print RMSE and NLPD on a labelled CSV")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--samples", type=int, default=None)

    p = sub.add_parser("check-grads", help="compare reverse-mode gradients with finite differences")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--max-points", type=int, default=16)
    p.add_argument(
        "--max-inducing",
        type=int,
        default=5,
        help="cap on inducing points per GP layer; large M makes K_uu too ill-conditioned for finite differences",
    )
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--rtol", type=float, default=1e-4)
    p.add_argument("--atol", type=float, default=1e-7)
    return parser


def _dataset_extra(dataset, config: RunConfig) -> dict:
    return {
        "feature_names": dataset.feature_names,
        "target_names": dataset.target_names,
        "normalised": dataset.normalised,
        "seed": config.training.seed,
        "eval_samples": config.training.eval_samples,
        "x_mean": dataset.x_scaler.mean,
        "x_std": dataset.x_scaler.std,
        "y_mean": dataset.y_scaler.mean,
        "y_std": dataset.y_scaler.std,
    }


def cmd_train(args) -> int:
    config = load_config(args.config)
    dataset = load_csv(config.data.path, config.data.targets, config.data.normalise)
    model = build_model(
        dataset.X,
        dataset.Y,
        config.layers,
        make_rng(config.training.seed, "init"),
        num_mc_samples=config.num_mc_samples,
    )
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    extra = _dataset_extra(dataset, config)
    checkpoint = ModelCheckpoint(out / "best.ckpt", extra=extra, config=config.echo())
    callbacks = [*default_callbacks(config.training), CSVLogger(out / "metrics.csv"), checkpoint]
    trainer = Trainer(model, config.training)
    fit(
        model,
        dataset.X,
        dataset.Y,
        config.training,
        callbacks,
        metrics_data=(dataset.X, dataset.Y_raw, dataset.y_scaler),
        trainer=trainer,
    )
    save_checkpoint(model, out / "model.ckpt", trainer=trainer, extra=extra, config=config.echo())
    last = trainer.history.records[-1] if trainer.history.records else None
    summary = {"epochs": len(trainer.history), "output": str(out)}
    if last is not None:
        summary.update(elbo=last.elbo, rmse=last.rmse, nlpd=last.nlpd)
    print(json.dumps(summary))
    return EXIT_OK


def _scalers(ckpt: CheckpointData) -> tuple[Standardizer, Standardizer]:
    arrays = ckpt.arrays
    try:
        return (
            Standardizer(arrays["x_mean"], arrays["x_std"]),
            Standardizer(arrays["y_mean"], arrays["y_std"]),
        )
    except KeyError as exc:
        raise CheckpointError(f"extra/{exc.args[0]}", "missing (checkpoint was not written by 'train')") from None


def _checkpoint_inputs(args, need_targets: bool):
    ckpt = read_checkpoint(args.checkpoint)
    xs, ys = _scalers(ckpt)
    features = ckpt.extra.get("feature_names")
    targets = ckpt.extra.get("target_names")
    if not isinstance(features, list) or not isinstance(targets, list):
        raise CheckpointError("extra", "feature/target names missing")
    X, Y = load_features(args.data, features, targets)
    if need_targets and Y is None:
        raise DataError(f"{args.data}: target column(s) {targets} required for evaluation")
    samples = args.samples if args.samples is not None else int(ckpt.extra.get("eval_samples", 100))
    if samples < 1:
        raise UsageError("--samples must be >= 1")
    rng = make_rng(int(ckpt.extra.get("seed", 0)), "evaluation")
    return ckpt, xs, ys, X, Y, samples, rng


def cmd_predict(args) -> int:
    ckpt, xs, ys, X, _, samples, rng = _checkpoint_inputs(args, need_targets=False)
    mixture = predict(ckpt.model, xs.forward(X), samples, rng)
    mean = ys.inverse(mixture.mean)
    var = ys.inverse_var(mixture.var)
    p = mean.shape[1]
    header = [f"mean_{i}" for i in range(1, p + 1)] + [f"var_{i}" for i in range(1, p + 1)]
    write_csv(args.out, header, np.concatenate([mean, var], axis=1))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt, xs, ys, X, Y, samples, rng = _checkpoint_inputs(args, need_targets=True)
    metrics = mixture_metrics(predict(ckpt.model, xs.forward(X), samples, rng), Y, ys)
    print(json.dumps(metrics))
    return EXIT_OK


def cmd_check_grads(args) -> int:
    config = load_config(args.config)
    dataset = load_csv(config.data.path, config.data.targets, config.data.normalise)
    n = min(args.max_points, dataset.num_data)
    # Evenly spaced rows, so sorted files still give well-separated inputs.
    rows = np.unique(np.linspace(0, dataset.num_data - 1, n).round().astype(int))
    X, Y = dataset.X[rows], dataset.Y[rows]
    if args.max_inducing < 1:
        raise UsageError("--max-inducing must be >= 1")
    layers = [
        {**spec, "num_inducing": min(spec["num_inducing"], args.max_inducing)} if "num_inducing" in spec else spec
        for spec in config.layers
    ]
    model = build_model(X, Y, layers, make_rng(config.training.seed, "init"), config.num_mc_samples)
    # Move every parameter off its initial value so no gradient is trivially zero.
    jitter = make_rng(config.training.seed, "evaluation")
    model.set_parameters({k: v + 0.1 * jitter.standard_normal(v.shape) for k, v in model.parameters().items()})
    seed = config.training.seed

    def objective(p):
        return -elbo(model, X, Y, make_rng(seed, "sampling"), p)

    report = check_gradients(objective, model.parameters(), args.step, args.rtol, args.atol)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_NUMERICAL


COMMANDS = {
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "check-grads": cmd_check_grads,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "deepgp: error: a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"deepgp: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"deepgp: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, FloatingPointError, ad.NotPositiveDefiniteError) as exc:
        print(f"deepgp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
