"""Command-line interface of the feedback spiking network trainer.

Commands:
    train             train a network (or validate its config with --dry-run)
    eval              evaluate a checkpoint on the test split
    equilibrium-diag  per-step fixed-point residuals of one sample
    gradcheck         implicit gradients against finite differences
    rates             per-layer firing rates over the test split

Exit codes: 0 success, 1 unexpected error, 2 configuration error, 3 I/O error,
4 failed check.

Dataset files are user supplied. The official archives are published at
http://yann.lecun.com/exdb/mnist/ (MNIST),
https://github.com/zalandoresearch/fashion-mnist (Fashion-MNIST) and
https://www.cs.toronto.edu/~kriz/cifar.html (CIFAR binary version).
Relative paths are also looked up under $EQSPIKE_DATA_DIR.
"""

import argparse
import logging
import math
import os
import sys
from collections.abc import Callable

import numpy as np

from src.core.config import ConfigError, RunConfig, load_run_config, parse_run_config
from src.core.data import (
    Dataset,
    fit_normalization,
    load_cifar_binary,
    load_dataset,
    normalize,
    read_idx_shape,
    resolve_data_path,
    synth_dataset,
    to_network_input,
)
from src.core.dynamics import InputEncoding, simulate
from src.core.equilibrium import SolverConfig, refine
from src.core.gradients import gradcheck
from src.core.model import NetworkSpec, init_params, layer_output_shapes
from src.core.numerics import RngStream
from src.core.training import EpochMetrics, OptimizerState, evaluate, fit
from src.utils.checkpoint import load_checkpoint, save_checkpoint
from src.utils.file_exporter import (
    GRADCHECK_HEADER,
    METRICS_HEADER,
    RATES_HEADER,
    RESIDUALS_HEADER,
    SOLVER_TRACE_HEADER,
    append_csv,
    save_csv,
    save_json,
)

EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CHECK_FAILED = 4

GRADCHECK_MAX_WIDTH = 64
GRADCHECK_TOL_IF = 1e-4
GRADCHECK_TOL_LIF = 1e-2
GRADCHECK_STREAM = 7


class CheckFailed(Exception):
    """A verification command found a violation."""


# --- Shared helpers ---


def _run_config(args: argparse.Namespace) -> RunConfig:
    """Load the config and apply command-line overrides."""
    cfg = load_run_config(args.config)
    data = cfg.model_dump(by_alias=True)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["output_dir"] = args.out
    data["train"]["threads"] = args.threads
    return parse_run_config(data)


def _image_shape(cfg: RunConfig) -> tuple[int, ...]:
    """(H, W, C) of the configured dataset, without loading it."""
    known = cfg.dataset.known_image_shape()
    if known is not None:
        return known
    dims = read_idx_shape(resolve_data_path(cfg.dataset.train_images))
    return (*dims[1:], 1) if len(dims) == 3 else tuple(dims[1:])


def _load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Load both splits, normalized with training-split statistics."""
    ds = cfg.dataset
    if ds.kind == "idx":
        train = load_dataset(
            ds.train_images, ds.train_labels, ds.num_classes, "train"
        )
        test = load_dataset(ds.test_images, ds.test_labels, ds.num_classes, "test")
    elif ds.kind == "cifar":
        train = load_cifar_binary(
            resolve_data_path(ds.train_images), ds.num_classes, "train"
        )
        test = load_cifar_binary(
            resolve_data_path(ds.test_images), ds.num_classes, "test"
        )
    else:
        n = ds.synthetic_samples
        train = synth_dataset(ds.kind, n, cfg.seed, ds.num_classes)
        test = synth_dataset(ds.kind, n, cfg.seed + 1, ds.num_classes)
    if ds.subset is not None:
        train = train.subset(ds.subset)
    if ds.test_subset is not None:
        test = test.subset(ds.test_subset)
    stats = fit_normalization(train)
    return normalize(train, stats), normalize(test, stats)


def _network(
    cfg: RunConfig, args: argparse.Namespace
) -> tuple[NetworkSpec, OptimizerState]:
    """The checkpointed network if --checkpoint is given, else a fresh one."""
    if args.checkpoint:
        checkpoint = load_checkpoint(args.checkpoint)
        return checkpoint.spec, checkpoint.state
    spec = init_params(cfg.template(_image_shape(cfg)), RngStream(cfg.seed))
    return spec, OptimizerState()


def _run_guarded(name: str, action: Callable[[], None]) -> None:
    """Run a command, mapping failures to exit codes."""
    try:
        action()
    except ConfigError as e:
        logging.error(f"Configuration error: {e}")
        sys.exit(EXIT_CONFIG)
    except OSError as e:
        logging.error(f"File error: {e}")
        sys.exit(EXIT_IO)
    except CheckFailed as e:
        logging.error(f"Check failed: {e}")
        sys.exit(EXIT_CHECK_FAILED)
    except Exception as e:
        logging.error(f"An unexpected error occurred in the {name} command: {e}")
        sys.exit(EXIT_ERROR)


def _progress(args: argparse.Namespace) -> bool:
    return not args.quiet and sys.stdout.isatty()


def _metrics_row(epoch: int, split: str, m: EpochMetrics) -> list[object]:
    return [epoch, split, m.loss, m.accuracy, m.mean_residual, m.total_firing_rate]


# --- Commands ---


def handle_train_command(args: argparse.Namespace) -> None:
    """Handle the 'train' command.

    Args:
        args (argparse.Namespace): The parsed arguments from the command line.
    """

    def run() -> None:
        cfg = _run_config(args)
        if args.dry_run:
            spec = init_params(cfg.template(_image_shape(cfg)), RngStream(cfg.seed))
            logging.info(f"Configuration is valid: '{spec.architecture}'.")
            print(f"parameters: {spec.parameter_count()}")
            return

        train, test = _load_datasets(cfg)
        spec, state = _network(cfg, args)
        out = cfg.output_dir
        metrics_file = os.path.join(out, "metrics.csv")
        checkpoint_file = os.path.join(out, "checkpoint.ide")
        config_dump = cfg.model_dump(mode="json", by_alias=True)

        def on_epoch_end(
            epoch: int, tr: EpochMetrics, te: EpochMetrics, st: OptimizerState
        ) -> None:
            append_csv(_metrics_row(epoch, "train", tr), METRICS_HEADER, metrics_file)
            append_csv(_metrics_row(epoch, "test", te), METRICS_HEADER, metrics_file)
            save_checkpoint(checkpoint_file, spec, st, config_dump, cfg.seed)

        summary = fit(
            spec,
            train,
            test,
            cfg.train,
            state,
            augment=cfg.dataset.augment,
            progress=_progress(args),
            on_epoch_end=on_epoch_end,
        )
        save_json(
            {
                "best_acc": summary.best_acc,
                "final_acc": summary.final_acc,
                "epochs": summary.epochs,
            },
            os.path.join(out, "summary.json"),
        )

    _run_guarded("train", run)


def handle_eval_command(args: argparse.Namespace) -> None:
    """Handle the 'eval' command."""

    def run() -> None:
        cfg = _run_config(args)
        if not args.checkpoint:
            raise ConfigError("The eval command needs --checkpoint.")
        _, test = _load_datasets(cfg)
        spec = load_checkpoint(args.checkpoint).spec
        T = args.T or cfg.train.T
        metrics = evaluate(
            spec, test, T, threads=cfg.train.threads, progress=_progress(args)
        )
        result = {
            "loss": metrics.loss,
            "accuracy": metrics.accuracy,
            "mean_residual": metrics.mean_residual,
            "total_firing_rate": metrics.total_firing_rate,
            "T": T,
        }
        logging.info(
            f"Test accuracy {metrics.accuracy:.4f}, loss {metrics.loss:.4f}."
        )
        save_json(result, os.path.join(cfg.output_dir, "eval.json"))

    _run_guarded("eval", run)


def handle_equilibrium_diag_command(args: argparse.Namespace) -> None:
    """Handle the 'equilibrium-diag' command: residual trace of one sample."""

    def run() -> None:
        cfg = _run_config(args)
        _, test = _load_datasets(cfg)
        spec, _ = _network(cfg, args)
        if not 0 <= args.sample < len(test):
            raise ConfigError(
                f"Sample {args.sample} is outside the test split ({len(test)})."
            )
        images = test.images[args.sample : args.sample + 1]
        x = to_network_input(images, spec.input_shape)[0]
        state, trace = simulate(
            spec, InputEncoding.constant(x), args.T, per_layer=args.all_layers
        )
        out = cfg.output_dir
        save_csv(trace.rows(), RESIDUALS_HEADER, os.path.join(out, "residuals.csv"))

        a_T = state.rates()[-1][0]
        solver = SolverConfig(method="broyden", max_iters=100, tol=1e-10)
        solution = refine(spec, state.x_star[0], a_T, solver)
        save_csv(
            solution.rows(),
            SOLVER_TRACE_HEADER,
            os.path.join(out, "solver_trace.csv"),
        )
        gap = float(np.max(np.abs(solution.a_star - a_T)))
        logging.info(
            f"Residual at T={args.T}: {trace.residual(args.T):.4e}; "
            f"max |a[T] - a*| = {gap:.4e} (solver converged: {solution.converged})."
        )

    _run_guarded("equilibrium-diag", run)


def _check_gradcheck_width(shapes: list[tuple[int, ...]]) -> None:
    widths = [math.prod(shape) for shape in shapes]
    if max(widths) > GRADCHECK_MAX_WIDTH:
        raise ConfigError(
            f"gradcheck is limited to {GRADCHECK_MAX_WIDTH} neurons per layer, "
            f"got {widths}."
        )


def handle_gradcheck_command(args: argparse.Namespace) -> None:
    """Handle the 'gradcheck' command."""

    def run() -> None:
        cfg = _run_config(args)
        if not args.checkpoint:
            _check_gradcheck_width(layer_output_shapes(cfg.template(_image_shape(cfg))))
        spec, _ = _network(cfg, args)
        _check_gradcheck_width([layer.op.output_shape for layer in spec.layers])
        train, _ = _load_datasets(cfg)
        x = to_network_input(train.images[:1], spec.input_shape)[0]
        label = int(train.labels[0])

        gen = RngStream(cfg.seed, GRADCHECK_STREAM).generator()
        params = spec.parameters()
        names = sorted(params)
        if abs(float(spec.feedback.alpha)) >= spec.feedback.clip:
            # The loss has a kink in α at the clip boundary.
            names.remove("feedback.alpha")
        coordinates = []
        for _ in range(args.coords):
            name = names[int(gen.integers(len(names)))]
            coordinates.append((name, int(gen.integers(params[name].size))))

        rows = gradcheck(spec, x, label, coordinates)
        save_csv(
            [r.as_csv_row() for r in rows],
            GRADCHECK_HEADER,
            os.path.join(cfg.output_dir, "gradcheck.csv"),
        )
        tol = GRADCHECK_TOL_IF if spec.neuron.variant == "IF" else GRADCHECK_TOL_LIF
        failed = [r for r in rows if r.rel_err is not None and r.rel_err > tol]
        abstained = sum(1 for r in rows if r.fd is None)
        logging.info(
            f"gradcheck: {len(rows) - len(failed)}/{len(rows)} within {tol:g} "
            f"({abstained} abstained)."
        )
        if failed:
            worst = max(failed, key=lambda r: r.rel_err or 0.0)
            raise CheckFailed(
                f"{len(failed)} coordinates exceed {tol:g}; worst "
                f"{worst.param}[{worst.coordinate}] rel_err {worst.rel_err:.3e}."
            )

    _run_guarded("gradcheck", run)


def handle_rates_command(args: argparse.Namespace) -> None:
    """Handle the 'rates' command: per-layer and total firing rates."""

    def run() -> None:
        cfg = _run_config(args)
        _, test = _load_datasets(cfg)
        spec, _ = _network(cfg, args)
        T = args.T or cfg.train.T
        metrics = evaluate(
            spec, test, T, threads=cfg.train.threads, progress=_progress(args)
        )
        rows: list[list[object]] = [
            [i + 1, rate] for i, rate in enumerate(metrics.layer_firing_rates)
        ]
        rows.append(["total", metrics.total_firing_rate])
        save_csv(rows, RATES_HEADER, os.path.join(cfg.output_dir, "rates.csv"))
        logging.info(
            f"Total firing rate over {len(test)} samples: "
            f"{metrics.total_firing_rate:.4f}."
        )

    _run_guarded("rates", run)


# --- Parser ---


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser with all subcommands."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        help="Run configuration JSON. Default: config.json in the project root.",
    )
    common.add_argument(
        "--checkpoint", help="Checkpoint file (.ide) to start from or inspect."
    )
    common.add_argument(
        "--out", help="Output directory. Default: output_dir from the config."
    )
    common.add_argument("--seed", type=int, help="Seed overriding the config.")
    common.add_argument(
        "--threads",
        type=int,
        default=1,
        help="Worker threads for batch simulation. Default: 1.",
    )
    common.add_argument("--quiet", action="store_true", help="Disable progress bars.")

    parser = argparse.ArgumentParser(
        description="Feedback spiking networks trained by implicit differentiation.",
        formatter_class=argparse.RawTextHelpFormatter,
    )
    subparsers = parser.add_subparsers(
        dest="command", help="Available commands", required=True
    )

    # --- Train Command ---
    train_parser = subparsers.add_parser(
        "train", parents=[common], help="Train a network"
    )
    train_parser.add_argument(
        "--dry-run",
        action="store_true",
        help="Validate the config and print the parameter count.",
    )
    train_parser.set_defaults(func=handle_train_command)

    # --- Eval Command ---
    eval_parser = subparsers.add_parser(
        "eval", parents=[common], help="Evaluate a checkpoint"
    )
    eval_parser.add_argument(
        "--T", type=int, help="Simulation steps. Default: train.T."
    )
    eval_parser.set_defaults(func=handle_eval_command)

    # --- Equilibrium Diagnostics Command ---
    diag_parser = subparsers.add_parser(
        "equilibrium-diag", parents=[common], help="Residual trace of one test sample"
    )
    diag_parser.add_argument(
        "--sample", type=int, default=0, help="Test sample index. Default: 0."
    )
    diag_parser.add_argument(
        "--T", type=int, default=100, help="Simulation steps. Default: 100."
    )
    diag_parser.add_argument(
        "--all-layers",
        action="store_true",
        help="Trace every layer, not only the last.",
    )
    diag_parser.set_defaults(func=handle_equilibrium_diag_command)

    # --- Gradcheck Command ---
    grad_parser = subparsers.add_parser(
        "gradcheck",
        parents=[common],
        help="Check implicit gradients against finite differences",
    )
    grad_parser.add_argument(
        "--coords", type=int, default=10, help="Number of coordinates. Default: 10."
    )
    grad_parser.set_defaults(func=handle_gradcheck_command)

    # --- Rates Command ---
    rates_parser = subparsers.add_parser(
        "rates", parents=[common], help="Firing rates over the test split"
    )
    rates_parser.add_argument(
        "--T", type=int, help="Simulation steps. Default: train.T."
    )
    rates_parser.set_defaults(func=handle_rates_command)
    return parser


def main(argv: list[str] | None = None) -> None:
    """Parse arguments and execute the chosen command."""
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
        stream=sys.stdout,
    )
    parser = build_parser()
    arguments = sys.argv[1:] if argv is None else argv
    if not arguments:
        parser.print_help(sys.stderr)
        sys.exit(EXIT_ERROR)
    args = parser.parse_args(arguments)
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    args.func(args)


if __name__ == "__main__":
    main()
