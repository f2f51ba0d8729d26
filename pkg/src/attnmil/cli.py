"""Command-line interface tying generation, training, evaluation together.

Exit codes: 0 success, 1 usage, 2 I/O or data-format problems,
3 numeric failures.  The environment variable IAG_LOG_LEVEL
(error | info | debug) controls verbosity; every command logs its full
resolved configuration before running.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .backbone import BackboneConfig, load_params, save_params
from .data import generate_dataset, load_dataset
from .errors import DataFormatError, DegenerateFieldError, NumericError
from .evaluation import emit_report, evaluate_model
from .experiments import SplitSpec, default_train_config, run_sweep, \
    write_results_csv
from .gradcheck import run_gradient_check
from .training import TrainConfig, train, write_history_csv
from .variants import VARIANTS, VariantConfig, pvpl_self_training

log = logging.getLogger("attnmil")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="attnmil", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--num", type=int, required=True, help="number of volumes")
    p.add_argument("--pos-frac", type=float, default=0.5)
    p.add_argument("--labeled-frac", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=int, nargs=3, default=(12, 24, 24),
                   metavar=("D", "H", "W"))

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--iters", type=int, default=3000)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--beta", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--lambda-const", type=float, default=1.0)
    p.add_argument("--decay-gamma", type=float, default=0.99)
    p.add_argument("--decay-interval", type=int, default=None)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--history", default=None,
                   help="loss history CSV (default: history.csv next to the model)")

    p = sub.add_parser("eval", help="evaluate a trained model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--pooling", choices=("attention", "max", "average"),
                   default="attention")
    p.add_argument("--decode", choices=("combined", "attention"),
                   default="combined")

    p = sub.add_parser("ablate", help="seed sweep over training variants")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--variant", nargs="+", choices=VARIANTS, default=["full"])
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    p.add_argument("--labeled-count", type=int, default=8)
    p.add_argument("--unlabeled-count", type=int, default=8)
    p.add_argument("--negatives", type=int, default=16)
    p.add_argument("--test-pos", type=int, default=8)
    p.add_argument("--test-neg", type=int, default=8)
    p.add_argument("--dims", type=int, nargs=3, default=(12, 24, 24),
                   metavar=("D", "H", "W"))
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--lambda-const", type=float, default=1.0)

    p = sub.add_parser("gradcheck",
                       help="verify analytic gradients by finite differences")
    p.add_argument("--dims", type=int, nargs=3, default=(4, 8, 8),
                   metavar=("D", "H", "W"))
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beta", type=float, default=20.0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("report", help="render figures for a run directory")
    p.add_argument("--run", required=True,
                   help="directory holding history.csv and/or cases.csv")
    p.add_argument("--out", default=None,
                   help="figure directory (default: <run>/figures)")
    return parser


def _log_config(args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "command"}
    log.info("command=%s config=%s", args.command, json.dumps(resolved, default=str))


def _cmd_gen_data(args) -> int:
    manifest = generate_dataset(
        args.out, n=args.num, pos_frac=args.pos_frac,
        labeled_frac=args.labeled_frac, dims=tuple(args.dims), seed=args.seed,
    )
    counts = manifest.counts()
    print(
        f"wrote {counts['total']} volumes to {args.out} "
        f"({counts['labeled_positives']} labeled positives, "
        f"{counts['unlabeled_positives']} unlabeled positives, "
        f"{counts['negatives']} negatives)"
    )
    return EXIT_OK


def _train_config_from_args(args) -> TrainConfig:
    base = default_train_config()
    return TrainConfig(
        max_iters=args.iters,
        lr=args.lr if args.lr is not None else base.lr,
        beta=args.beta,
        decay_gamma=args.decay_gamma,
        decay_interval=args.decay_interval,
        seed=args.seed,
        variant=VariantConfig(args.variant, lambda_const=args.lambda_const),
        backbone=BackboneConfig(channels=args.channels, layers=args.layers),
    )


def _cmd_train(args) -> int:
    samples = load_dataset(args.data)
    config = _train_config_from_args(args)
    if args.variant == "pvpl":
        state = pvpl_self_training(samples, config).student
    else:
        state = train(samples, config)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    save_params(state.params, out)
    history_path = Path(args.history) if args.history else out.parent / "history.csv"
    write_history_csv(state, history_path)
    last = state.history[-1] if state.history else None
    print(
        f"trained {config.max_iters} iterations on {len(samples)} volumes; "
        f"model -> {out}, history -> {history_path}"
        + (f", final lr {last.lr:.2e}" if last else "")
    )
    return EXIT_OK


def _cmd_eval(args) -> int:
    samples = load_dataset(args.data)
    params = load_params(args.model)
    report = evaluate_model(
        samples, params, pooling=args.pooling, decode=args.decode,
        config_echo={"model": str(args.model), "data": str(args.data)},
    )
    paths = emit_report(report, args.out)

    def fmt(v):
        return "n/a" if v is None else f"{v:.4f}"

    print(
        f"evaluated {len(report.cases)} cases: mean_dsc={fmt(report.mean_dsc)} "
        f"sensitivity={fmt(report.sensitivity)} "
        f"specificity={fmt(report.specificity)}; report -> {paths['summary']}"
    )
    return EXIT_OK


def _cmd_ablate(args) -> int:
    overrides = {}
    if args.iters is not None:
        overrides["max_iters"] = args.iters
    if args.lr is not None:
        overrides["lr"] = args.lr
    if args.beta is not None:
        overrides["beta"] = args.beta
    if args.channels is not None:
        overrides["backbone"] = BackboneConfig(channels=args.channels)
    overrides["variant"] = VariantConfig("full", lambda_const=args.lambda_const)
    config = default_train_config(**overrides)
    spec = SplitSpec(
        labeled=args.labeled_count,
        unlabeled=args.unlabeled_count,
        negatives=args.negatives,
        test_pos=args.test_pos,
        test_neg=args.test_neg,
        dims=tuple(args.dims),
    )
    results = run_sweep(args.variant, args.seeds, spec=spec, base_config=config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_results_csv(results, out / "results.csv")
    for r in results:
        emit_report(r.report, out / f"{r.variant}_seed{r.seed}")

    def fmt(v):
        return "n/a" if v is None else f"{v:.4f}"

    for variant in args.variant:
        rows = [r for r in results if r.variant == variant]
        dscs = [r.mean_dsc for r in rows if r.mean_dsc is not None]
        mean = sum(dscs) / len(dscs) if dscs else None
        print(f"{variant}: mean_dsc over seeds = {fmt(mean)} ({len(rows)} runs)")
    print(f"results -> {out / 'results.csv'}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    result = run_gradient_check(
        dims=tuple(args.dims), channels=args.channels, seed=args.seed,
        beta=args.beta, step=args.step,
    )
    for name, err in result.per_tensor.items():
        print(f"{name}: max relative error {err:.3e}")
    status = "PASS" if result.passed(args.tol) else "FAIL"
    print(
        f"{status}: {result.parameters_checked} parameters, worst "
        f"{result.max_rel_error:.3e} (tolerance {args.tol:.1e}, "
        f"{result.seconds:.1f}s)"
    )
    if not result.passed(args.tol):
        raise NumericError(
            f"gradient check failed: {result.max_rel_error:.3e} >= {args.tol:.1e}"
        )
    return EXIT_OK


def _cmd_report(args) -> int:
    from .report import render_run_figures

    written = render_run_figures(args.run, args.out)
    for path in written:
        print(f"figure -> {path}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
    "report": _cmd_report,
}


def _configure_logging() -> None:
    level = os.environ.get("IAG_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(
            f"IAG_LOG_LEVEL must be one of {sorted(levels)}, got {level!r}"
        )
    logging.basicConfig(
        level=levels[level],
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )


def main(argv=None) -> int:
    parser = build_parser()
    try:
        _configure_logging()
        args = parser.parse_args(argv)
        _log_config(args)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"invalid value: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DataFormatError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, DegenerateFieldError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
