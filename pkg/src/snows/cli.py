"""Command-line interface for SNOWS pruning."""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from snows import checkpoint, config, netgraph, pipeline, studies, suites, zoo
from snows import data as datasets
from snows import tensor as T
from snows.errors import ConfigError, NumericalError, SnowsError

logger = logging.getLogger(__name__)

_BUILDERS = {"mlp": zoo.mlp, "toy-cnn": zoo.toy_cnn, "resnet-block": zoo.resnet_block}
_SYNTHETIC_DEFAULT = 256
_NOT_CONFIG = ("command", "config", "trace")


def configure_logging() -> None:
    """Root logger level from ``SNOWS_LOG``; unknown names fall back to WARNING."""
    level = logging.getLevelName(os.environ.get("SNOWS_LOG", "WARNING").upper())
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    logging.getLogger().setLevel(level)


def load_network(cfg: config.RunConfig, weights_path: Optional[str]) -> netgraph.NetworkGraph:
    """Manifest plus checkpoint, or a seeded zoo model optionally overwritten by a checkpoint.

    ``--dtype`` converts a loaded manifest network; zoo models are built in it directly.
    """
    if cfg.manifest is not None:
        g, _ = pipeline.load_graph(cfg.manifest, weights_path)
        return g if cfg.dtype is None else g.with_dtype(cfg.dtype)
    g = zoo.build(_BUILDERS[cfg.model](dtype=cfg.dtype or "float32"), cfg.seed)
    if weights_path is not None:
        ckpt = checkpoint.load_checkpoint(
            weights_path, dtype=g.dtype, manifest_hash=netgraph.manifest_hash(g.to_manifest())
        )
        g = g.replace_weights(ckpt.weights())
    return g


def _class_count(g: netgraph.NetworkGraph) -> int:
    return int(np.prod(g.output_shape))


def load_data(cfg: config.RunConfig, g: netgraph.NetworkGraph) -> Tuple[T.Tensor, np.ndarray]:
    """``synthetic[:N]`` draws seeded class-conditional Gaussians; anything else is a record file."""
    source = cfg.data or "synthetic"
    if source == "synthetic" or source.startswith("synthetic:"):
        _, _, count = source.partition(":")
        try:
            n = int(count) if count else _SYNTHETIC_DEFAULT
        except ValueError as exc:
            raise ConfigError(f"bad synthetic sample count in {source!r}") from exc
        return datasets.synthetic_gaussian(
            T.Rng(cfg.seed), n, g.input_shape, classes=_class_count(g), dtype=g.dtype
        )
    return datasets.read_records(source, datasets.layout_for(cfg.layout, g.input_shape), g.dtype)


def _write_json(path: Path, document: Dict[str, Any]) -> Path:
    path.write_text(json.dumps(document, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def prune_command(cfg: config.RunConfig) -> int:
    """Handle the prune command."""
    out = Path(cfg.out)
    config.write_run_record(cfg, out)
    g = load_network(cfg, cfg.checkpoint)
    x, _ = load_data(cfg, g)
    resume = None
    if cfg.resume is not None:
        resume = checkpoint.load_checkpoint(
            cfg.resume, dtype=g.dtype, manifest_hash=netgraph.manifest_hash(g.to_manifest())
        )
    pruned, report = pipeline.prune_network(
        g, cfg.prune_config(str(out / "partial.snws")), x, resume=resume
    )
    netgraph.save_manifest(pruned.to_manifest(), out / "manifest.json")
    pipeline.save_pruned(out / "pruned.snws", pruned, report.masks, {"seed": cfg.seed})
    path = report.write(out)
    print(f"pruned {len(report.layers)} layer(s), sparsity {report.sparsity:.4f}; report at {path}")
    return 0


def eval_command(cfg: config.RunConfig) -> int:
    """Handle the eval command.

    ``--reference`` defaults to the seeded dense model with ``--model`` and to
    ``--checkpoint`` itself with ``--manifest``.
    """
    out = Path(cfg.out)
    config.write_run_record(cfg, out)
    pruned = load_network(cfg, cfg.checkpoint)
    if cfg.reference is not None or cfg.manifest is not None:
        dense = load_network(cfg, cfg.reference or cfg.checkpoint)
    else:
        dense = load_network(cfg, None)
    x, labels = load_data(cfg, dense)
    report = pipeline.evaluate_network(pruned, dense, x, labels, cfg.horizon)
    _write_json(out / "eval.json", report.to_dict())
    print(
        f"accuracy {report.accuracy:.4f} (reference {report.reference_accuracy:.4f}, "
        f"delta {report.accuracy_delta:+.4f})"
    )
    return 0


def ablate_command(cfg: config.RunConfig) -> int:
    """Handle the ablate command."""
    out = Path(cfg.out)
    config.write_run_record(cfg, out)
    g = load_network(cfg, cfg.checkpoint)
    x, _ = load_data(cfg, g)
    if cfg.study == "k-sweep":
        result = studies.k_sweep(g, x, cfg.prune_config(), cfg.ks)
    else:
        if cfg.calib_n is not None:
            x = datasets.calibration_sample(x, cfg.calib_n, T.Rng(cfg.seed))
        task = studies.layer_task(g, x, pipeline.MaskSpec.parse(cfg.mask), cfg.horizon, cfg.layer)
        newton_cfg = cfg.newton_config()
        if cfg.study == "cg-iters":
            result = studies.cg_iters(task, newton_cfg, cfg.seed, cfg.cg_budgets)
        elif cfg.study == "sgd-vs-newton":
            result = studies.sgd_vs_newton(
                task, newton_cfg, cfg.seed, cfg.lrs, cfg.sgd_steps, cfg.newton_steps, cfg.batch_size
            )
        else:
            result = studies.fisher_vs_newton(task, newton_cfg, cfg.newton_steps, cfg.seed)
    path = out / f"{cfg.study}.csv"
    result.write_csv(path)
    _write_json(out / f"{cfg.study}.summary.json", result.summary)
    print(f"{cfg.study}: {len(result.rows)} rows written to {path}")
    return 0


def oracle_command(cfg: config.RunConfig) -> int:
    """Handle the oracle command; exits non-zero when any check fails."""
    rows = suites.run_suite(cfg.suite, cfg.seed)
    out = Path(cfg.out)
    config.write_run_record(cfg, out)
    _write_json(out / "oracle.json", {"checks": [r.to_dict() for r in rows]})
    print(suites.format_table(rows))
    failed = [r for r in rows if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(rows)} checks failed", file=sys.stderr)
        return NumericalError.exit_code
    return 0


class _Override(argparse.Action):
    """``--override NAME=SPEC`` collected into a dict."""

    def __call__(self, parser, namespace, values, option_string=None):
        name, sep, spec = values.partition("=")
        if not sep or not name:
            parser.error(f"{option_string} expects NAME=SPEC, got {values!r}")
        current = dict(getattr(namespace, self.dest, None) or {})
        current[name] = spec
        setattr(namespace, self.dest, current)


def _common(parser: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    parser.add_argument("--config", help="JSON config file; explicit flags override it")
    parser.add_argument("--out", default=S, help="Output directory")
    parser.add_argument("--seed", type=int, default=S, help="Seed for every random stream")
    parser.add_argument("--threads", type=int, default=S, help="Evaluation threads (default: all cores)")
    parser.add_argument("--trace", choices=["console", "none"], default="none", help="Span export")


def _network(parser: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    parser.add_argument("--manifest", default=S, help="Network manifest JSON")
    parser.add_argument("--checkpoint", default=S, help="Weight checkpoint for the manifest")
    parser.add_argument("--model", choices=sorted(_BUILDERS), default=S, help="Seeded toy network")
    parser.add_argument(
        "--dtype", choices=config.DTYPES, default=S, help="Working precision (default: float32 for --model)"
    )
    parser.add_argument("--data", default=S, help="Record file, or synthetic[:N]")
    parser.add_argument("--layout", choices=config.LAYOUTS, default=S, help="Record layout")
    parser.add_argument("--calib-n", dest="calib_n", type=int, default=S, help="Calibration samples")
    parser.add_argument("--chunk-size", dest="chunk_size", type=int, default=S)


def _optimizer(parser: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    parser.add_argument("--k", dest="horizon", type=int, default=S, help="Reconstruction horizon K")
    parser.add_argument("--mask", default=S, help="unstructured:S | nm:N:M | import:PATH")
    parser.add_argument("--override", dest="overrides", action=_Override, default=S, metavar="NAME=SPEC")
    parser.add_argument("--lambda", dest="lam", type=float, default=S, help="Damping")
    parser.add_argument("--cg-tol", dest="cg_tol", type=float, default=S)
    parser.add_argument("--cg-max-iters", dest="cg_max_iters", type=int, default=S)
    parser.add_argument("--cg-relative", dest="cg_relative", action="store_true", default=S)
    parser.add_argument("--eps-fd", dest="eps_fd", type=float, default=S, help="0 for exact HVPs")
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    parser.add_argument("--batches", type=int, default=S, help="Batches per epoch")
    parser.add_argument("--epochs", type=int, default=S)
    parser.add_argument("--early-stop", dest="early_stop", type=float, default=S)


def create_parser() -> argparse.ArgumentParser:
    """Create the argument parser."""
    parser = argparse.ArgumentParser(
        prog="snows",
        description="One-shot pruning with K-step reconstruction and Hessian-free Newton",
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands")
    S = argparse.SUPPRESS

    prune = subparsers.add_parser("prune", help="Prune every prunable layer of a network")
    _common(prune)
    _network(prune)
    _optimizer(prune)
    prune.add_argument("--resume", default=S, help="Partial checkpoint from an aborted run")

    evaluate = subparsers.add_parser("eval", help="Accuracy and per-layer losses against a reference")
    _common(evaluate)
    _network(evaluate)
    evaluate.add_argument("--reference", default=S, help="Dense reference checkpoint")
    evaluate.add_argument("--k", dest="horizon", type=int, default=S)

    ablate = subparsers.add_parser("ablate", help="Run an ablation study and write CSVs")
    _common(ablate)
    _network(ablate)
    _optimizer(ablate)
    ablate.add_argument("--study", choices=config.STUDIES, default=S)
    ablate.add_argument("--layer", type=int, default=S, help="Prunable layer index")
    ablate.add_argument("--ks", type=int, nargs="+", default=S)
    ablate.add_argument("--cg-budgets", dest="cg_budgets", type=int, nargs="+", default=S)
    ablate.add_argument("--lrs", type=float, nargs="+", default=S)
    ablate.add_argument("--sgd-steps", dest="sgd_steps", type=int, default=S)
    ablate.add_argument("--newton-steps", dest="newton_steps", type=int, default=S)

    oracle = subparsers.add_parser("oracle", help="Check solver paths against brute-force references")
    _common(oracle)
    oracle.add_argument("--suite", choices=config.SUITES, default=S)

    return parser


def resolve_args(args: argparse.Namespace) -> config.RunConfig:
    flags = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    return config.resolve(args.command, flags, args.config)


def _install_console_tracing():
    from opentelemetry.sdk.trace import TracerProvider
    from opentelemetry.sdk.trace.export import ConsoleSpanExporter, SimpleSpanProcessor

    from snows.instrumentation import SnowsInstrumentor

    provider = TracerProvider()
    provider.add_span_processor(SimpleSpanProcessor(ConsoleSpanExporter(out=sys.stderr)))
    instrumentor = SnowsInstrumentor()
    instrumentor.instrument(tracer_provider=provider)
    return instrumentor


def _report_error(exc: BaseException, exit_code: int) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": exit_code}), file=sys.stderr)
    return exit_code


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point."""
    parser = create_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return 1

    configure_logging()
    command_map = {
        "prune": prune_command,
        "eval": eval_command,
        "ablate": ablate_command,
        "oracle": oracle_command,
    }

    instrumentor = None
    try:
        cfg = resolve_args(args)
        if args.trace == "console":
            instrumentor = _install_console_tracing()
        return command_map[args.command](cfg)
    except SnowsError as e:
        return _report_error(e, e.exit_code)
    except OSError as e:
        return _report_error(e, 4)
    finally:
        if instrumentor is not None:
            instrumentor.uninstrument()


if __name__ == "__main__":
    sys.exit(main())
