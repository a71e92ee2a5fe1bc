"""Command-line entry point: train, eval, attack, inspect and convert."""

import argparse
import gzip
import logging
import sys
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import ValidationError

from mspcaps.attack import DEFAULT_EPSILONS, robustness_sweep, write_robustness_csv
from mspcaps.configuration import Configuration, RunConfig, load_run_config
from mspcaps.data import load_dataset, parse_cifar10_bin, parse_idx, write_mspd
from mspcaps.errors import (
    ConfigError,
    DataError,
    FormatError,
    IncompatibleCheckpointError,
    MSPCapsError,
    NumericError,
)
from mspcaps.graph import METRICS_FILE, run_training
from mspcaps.model import ModelConfig, MSPCaps, build_model
from mspcaps.train import Checkpoint, MetricsRow, append_metrics, evaluate, load_checkpoint
from mspcaps.utils import format_model_summary, summarize_model

logger = logging.getLogger("mspcaps")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _parse_seeds(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        return parts[0], parts[0], parts[0]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("--seed takes one integer or init,shuffle,dropout")
    return parts[0], parts[1], parts[2]


def _parse_mask(text: str) -> tuple[bool, bool, bool]:
    parts = [p.strip().lower() in ("1", "true", "yes") for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("--scale-mask takes three comma-separated flags, e.g. 1,1,0")
    return parts[0], parts[1], parts[2]


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def _model_from_checkpoint(checkpoint: Checkpoint) -> MSPCaps:
    first = next(v for k, v in checkpoint.tensors.items() if k.startswith("param/"))
    model = build_model(checkpoint.config, dtype=first.dtype)
    checkpoint.restore(model)
    return model


def _stored_run(checkpoint: Checkpoint) -> RunConfig:
    return RunConfig.model_validate(checkpoint.metadata.get("run_config", {}))


def _expected_config(path: Optional[str]) -> Optional[ModelConfig]:
    return load_run_config(path).resolve().model_config_for() if path else None


# Commands


def cmd_train(args: argparse.Namespace) -> int:
    """Train from a run config and print the final test accuracy."""
    seeds = args.seed or (None, None, None)
    run = load_run_config(
        args.config,
        preset=args.preset,
        dataset=args.dataset,
        data_dir=args.data_dir,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        limit_train=args.limit_train,
        limit_test=args.limit_test,
        routing_kind=args.routing,
        scale_mask=args.scale_mask,
        patch_size=args.patch_size,
        weight_shared=args.weight_shared,
        precision=args.precision,
        out_dir=args.out_dir,
        init_seed=seeds[0],
        shuffle_seed=seeds[1],
        dropout_seed=seeds[2],
        timing=False if args.no_timing else None,
    )
    output = run_training(run, resume=args.resume)
    final = output.get("final") or {}
    if final:
        print(f"final test accuracy {final['accuracy']:.4f} after epoch {final['epoch']}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    """Score a checkpoint and append an `eval` row to its metrics file."""
    checkpoint = load_checkpoint(args.checkpoint, _expected_config(args.config))
    stored = _stored_run(checkpoint)
    model = _model_from_checkpoint(checkpoint)
    data = load_dataset(args.dataset or stored.dataset, args.data_dir or stored.data_dir, args.split, args.limit)
    metrics = evaluate(model, data, batch_size=args.batch_size)
    print(f"accuracy {metrics.accuracy:.4f} on {metrics.count} samples (loss {metrics.loss:.4f})")
    metrics_path = Path(args.metrics) if args.metrics else Path(args.checkpoint).parent / METRICS_FILE
    epoch = int(checkpoint.metadata.get("epoch", 0))
    append_metrics(metrics_path, [MetricsRow(epoch, "eval", metrics.loss, metrics.accuracy, 0.0, 0.0)])
    return EXIT_OK


def cmd_attack(args: argparse.Namespace) -> int:
    """Sweep the attack budgets for a checkpoint and append the curve to the robustness CSV."""
    checkpoint = load_checkpoint(args.checkpoint, _expected_config(args.config))
    stored = _stored_run(checkpoint)
    model = _model_from_checkpoint(checkpoint)
    data = load_dataset(args.dataset or stored.dataset, args.data_dir or stored.data_dir, "test", args.limit)
    curve = robustness_sweep(
        model,
        data,
        args.eps_list,
        args.attack,
        steps=args.steps,
        model_name=args.model_name or Path(args.checkpoint).stem,
        batch_size=args.batch_size,
    )
    write_robustness_csv(args.out, [curve], append=not args.overwrite)
    for eps, accuracy in curve.points:
        print(f"{curve.attack} eps={eps:g}: accuracy {accuracy:.4f}")
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    """Print the parameter and capsule report of a checkpoint or a configuration."""
    if args.checkpoint:
        checkpoint = load_checkpoint(args.checkpoint)
        model = _model_from_checkpoint(checkpoint)
        title = str(args.checkpoint)
    else:
        overrides: dict[str, Any] = {"routing_kind": args.routing, "scale_mask": args.scale_mask}
        overrides.update(patch_size=args.patch_size, weight_shared=args.weight_shared)
        run = load_run_config(args.config, preset=args.preset, dataset=args.dataset, **overrides).resolve()
        model = build_model(run.model_config_for())
        title = f"MSPCaps {run.preset} ({run.model_config_for().routing_kind.upper()} routing)"
    print(format_model_summary(summarize_model(model), title))
    return EXIT_OK


def _detect_format(path: Path) -> str:
    name = path.name.lower().removesuffix(".gz")
    if name.endswith("ubyte") or name.endswith(".idx"):
        return "idx"
    if name.endswith(".bin"):
        return "cifar-bin"
    raise DataError(f"cannot detect the format of {path}; pass --format idx or --format cifar-bin")


def _read_input(path: Path) -> bytes:
    if not path.exists():
        raise DataError(f"missing input file {path}")
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def cmd_convert(args: argparse.Namespace) -> int:
    """Convert IDX pairs or CIFAR-10 batches into one MSPD file."""
    inputs = [Path(p) for p in args.inputs]
    fmt = args.format or _detect_format(inputs[0])
    if fmt == "idx":
        if len(inputs) != 2:
            raise DataError("idx conversion takes an images file and a labels file")
        images = parse_idx(_read_input(inputs[0]))
        labels = parse_idx(_read_input(inputs[1]))
        if images.ndim != 3 or labels.ndim != 1:
            raise DataError("idx conversion expects an image file (N, H, W) first, then a label file (N,)")
        images = images[:, None]
    else:
        parts = [parse_cifar10_bin(_read_input(p)) for p in inputs]
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    write_mspd(args.output, images, labels)
    print(f"wrote {images.shape[0]} items of shape {images.shape[1:]} to {args.output}")
    return EXIT_OK


# Parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=["tiny", "large"])
    p.add_argument("--routing", choices=["car", "dr"])
    p.add_argument("--scale-mask", type=_parse_mask)
    p.add_argument("--patch-size", type=int)
    shared = p.add_mutually_exclusive_group()
    shared.add_argument("--shared", dest="weight_shared", action="store_const", const=True)
    shared.add_argument("--unshared", dest="weight_shared", action="store_const", const=False)


def build_parser() -> argparse.ArgumentParser:
    """Build the `mspcaps` argument parser."""
    parser = argparse.ArgumentParser(prog="mspcaps", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run the training recipe")
    train.add_argument("--config")
    _add_model_flags(train)
    train.add_argument("--dataset", choices=["mnist", "fashion_mnist", "svhn", "cifar10"])
    train.add_argument("--data-dir")
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--limit-train", type=int)
    train.add_argument("--limit-test", type=int)
    train.add_argument("--precision", choices=["float32", "float64"])
    train.add_argument("--seed", type=_parse_seeds, help="one integer, or init,shuffle,dropout")
    train.add_argument("--out-dir")
    train.add_argument("--resume", help="checkpoint to continue from")
    train.add_argument("--no-timing", action="store_true", help="write 0.0 seconds for reproducible metrics")
    train.set_defaults(handler=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("--config", help="run config whose model must match the checkpoint")
    ev.add_argument("--dataset", choices=["mnist", "fashion_mnist", "svhn", "cifar10"])
    ev.add_argument("--data-dir")
    ev.add_argument("--split", choices=["train", "test"], default="test")
    ev.add_argument("--limit", type=int)
    ev.add_argument("--batch-size", type=int, default=256)
    ev.add_argument("--metrics", help="metrics CSV to append to (default: next to the checkpoint)")
    ev.set_defaults(handler=cmd_eval)

    attack = sub.add_parser("attack", help="robustness sweep under FGSM or BIM")
    attack.add_argument("checkpoint")
    attack.add_argument("--config")
    attack.add_argument("--attack", choices=["fgsm", "bim"], default="fgsm")
    attack.add_argument("--eps-list", type=_parse_floats, default=list(DEFAULT_EPSILONS))
    attack.add_argument("--steps", type=int, default=10)
    attack.add_argument("--dataset", choices=["mnist", "fashion_mnist", "svhn", "cifar10"])
    attack.add_argument("--data-dir")
    attack.add_argument("--limit", type=int)
    attack.add_argument("--batch-size", type=int, default=128)
    attack.add_argument("--model-name")
    attack.add_argument("--out", default="robustness.csv")
    attack.add_argument("--overwrite", action="store_true")
    attack.set_defaults(handler=cmd_attack)

    inspect = sub.add_parser("inspect", help="parameter and capsule report")
    inspect.add_argument("checkpoint", nargs="?")
    inspect.add_argument("--config")
    inspect.add_argument("--dataset", choices=["mnist", "fashion_mnist", "svhn", "cifar10"])
    _add_model_flags(inspect)
    inspect.set_defaults(handler=cmd_inspect)

    convert = sub.add_parser("convert", help="convert IDX or CIFAR-10 binaries to the MSPD container")
    convert.add_argument("inputs", nargs="+")
    convert.add_argument("--format", choices=["idx", "cifar-bin"])
    convert.add_argument("--output", "-o", required=True)
    convert.set_defaults(handler=cmd_convert)
    return parser


def setup_logging(level: str) -> None:
    """Send log records to stderr at `level`."""
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


def main(argv: Optional[list[str]] = None) -> int:
    """Run one command and return its exit code."""
    args = build_parser().parse_args(argv)
    try:
        setup_logging(Configuration.from_runnable_config().mspcaps_log_level)
        return args.handler(args)
    except (ConfigError, IncompatibleCheckpointError, ValidationError) as e:
        logger.error("%s", e)
        return EXIT_CONFIG
    except (DataError, FormatError, FileNotFoundError) as e:
        logger.error("%s", e)
        return EXIT_DATA
    except NumericError as e:
        logger.error("%s", e)
        return EXIT_NUMERIC
    except MSPCapsError as e:
        logger.error("%s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
