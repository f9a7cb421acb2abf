"""Command line entry point: ``clbench {fetch,run,suite,tsne,toy}``.

Exit codes: 0 success, 1 usage, 2 data or I/O, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import data as D
from . import eval as E
from . import experiment as X
from . import nn
from . import strategies as S
from . import toy

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

FLAG_TO_FIELD = {
    "scenario": "scenario", "setting": "setting", "strategy": "strategy", "lambda_": "lam",
    "lr": "lr", "epochs": "epochs_per_task", "batch_size": "batch_size", "seed": "seed",
    "subsample": "subsample", "data_root": "data_root", "out": "out_dir",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value file; flags override it")
    p.add_argument("--scenario", choices=X.SCENARIOS)
    p.add_argument("--setting", choices=D.SETTINGS)
    p.add_argument("--strategy", help=f"one of {', '.join(S.KINDS)}")
    p.add_argument("--lambda", dest="lambda_", type=float, help="importance of the penalty")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int, help="epochs per task")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--subsample", help="training items per task, or 'full'")
    p.add_argument("--data-root")
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clbench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fetch", help="download MNIST, Fashion-MNIST and KMNIST")
    p.add_argument("--data-root", default="data")
    p.add_argument("--mirror", action="append", default=[], metavar="NAME=URL",
                   help="override the base URL of one dataset")

    for name, text in (("run", "train one strategy on one setting"),
                       ("suite", "every strategy in both settings")):
        _add_experiment_flags(sub.add_parser(name, help=text))

    p = sub.add_parser("tsne", help="embed latents of a trained checkpoint")
    _add_experiment_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--no-svg", action="store_true")

    p = sub.add_parser("toy", help="minimal example and separator demos")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for the demo point/hyperplane CSVs")
    return parser


def resolve_config(args: argparse.Namespace) -> X.ExperimentConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(X.read_config_file(args.config))
    for flag, name in FLAG_TO_FIELD.items():
        v = getattr(args, flag, None)
        if v is None:
            continue
        if name == "subsample":
            v = X.parse_value("subsample", str(v))
        values[name] = v
    return X.ExperimentConfig(**values)


def _cmd_toy(args) -> int:
    report = toy.minimal_example()
    print("minimal example")
    print("\n".join("  " + line for line in report.lines()))
    for label, overlap in (("separated", False), ("overlap", True)):
        demo = toy.separator_demo(args.seed, overlap=overlap)
        print(f"separator demo ({label})")
        print("\n".join("  " + line for line in demo.lines()))
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            toy.write_demo_csv(demo, out / f"demo_{label}_points.csv",
                               out / f"demo_{label}_hyperplanes.csv")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = resolve_config(args)
    res = X.run_experiment(cfg)
    last = res.rows[-1]
    print(f"{cfg.strategy} {cfg.setting}: final global accuracy {last.test_acc_global:.4f} "
          f"per task {' '.join(f'{a:.4f}' for a in last.test_acc_per_task)}")
    if res.paths:
        print(f"artifacts in {cfg.out_dir}")
    return EXIT_OK


def _cmd_suite(args) -> int:
    cfg = resolve_config(args)
    suite = X.run_suite(cfg, keep_lambda=args.lambda_ is not None)
    for (kind, setting), res in sorted(suite.results.items()):
        print(f"{kind:10s} {setting:12s} final {res.rows[-1].test_acc_global:.4f}")
    for key, msg in sorted(suite.failures.items()):
        print(f"{key[0]:10s} {key[1]:12s} FAILED {msg}")
    return EXIT_OK if not suite.failures else EXIT_NUMERIC


def _cmd_tsne(args) -> int:
    cfg = resolve_config(args)
    dump, res = X.run_tsne(args.checkpoint, cfg, write_svg=not args.no_svg)
    print(f"{len(dump.task_labels)} points, KL {res.kl_initial:.4f} -> {res.kl_final:.4f}")
    return EXIT_OK


def _cmd_fetch(args) -> int:
    overrides = {}
    for item in args.mirror:
        name, _, url = item.partition("=")
        if name not in D.FELLOWSHIP or not url:
            raise ValueError(f"bad --mirror {item!r}; expected NAME=URL with NAME in {D.FELLOWSHIP}")
        overrides[name] = url
    got = X.fetch_datasets(args.data_root, overrides)
    print(f"{len(got)} files downloaded, all six pairs present in {args.data_root}")
    return EXIT_OK


COMMANDS = {"toy": _cmd_toy, "run": _cmd_run, "suite": _cmd_suite, "tsne": _cmd_tsne,
            "fetch": _cmd_fetch}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (E.NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, D.IdxFormatError, D.ConsistencyError, nn.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, nn.UsageError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
