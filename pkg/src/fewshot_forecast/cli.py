"""Command-line entry point.

Every verb reads one YAML config (``--config``) mirroring
:class:`~fewshot_forecast.harness.ExperimentConfig`; ``--set key=value``
overrides any field by dotted path and the shortcut flags below override the
common ones. Exit codes: 0 ok, 1 other failure, 2 config, 3 data, 4 numeric.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from . import __version__, harness
from .data import prepare_archive
from .errors import ConfigError, DataError, FewShotError, NumericError
from .synthetic import make_corpus, write_ucr_archive

log = logging.getLogger("fewshot_forecast")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _parse_set(item: str) -> tuple[str, object]:
    key, sep, value = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    return key.strip(), yaml.safe_load(value)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="YAML experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field by dotted path, e.g. train.max_epochs=100")
    p.add_argument("--prepared-dir")
    p.add_argument("--output-dir")
    p.add_argument("--methods", nargs="+")
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--clip", type=float, help="global gradient-norm clip, 0 disables")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewshot-forecast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("prepare", help="filter, truncate, subsample and normalize a UCR-layout archive")
    _common(p)
    p.add_argument("--dataset-root", help=f"archive root (default: config or ${harness.DATA_ROOT_ENV})")
    p.add_argument("--tasks", nargs="+", help="only these task folders")

    p = sub.add_parser("train", help="train the configured methods for every seed")
    _common(p)

    p = sub.add_parser("evaluate", help="train (or reuse checkpoints) and write the RMSE table")
    _common(p)
    p.add_argument("--manifest", help="re-run the configuration recorded in a manifest.json")

    p = sub.add_parser("sweep", help="mean RMSE across training-task counts or test support sizes")
    _common(p)
    p.add_argument("--axis", required=True, choices=harness.SWEEP_AXES)

    p = sub.add_parser("traces", help="write true vs predicted values for some series of one task")
    _common(p)
    p.add_argument("--method", required=True, choices=harness.METHODS)
    p.add_argument("--task", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--series", nargs="+", type=int, help="row indices (default: three query series)")

    p = sub.add_parser("report", help="summarize an output directory")
    p.add_argument("output_dir")

    p = sub.add_parser("make-synthetic", help="write a synthetic corpus in UCR layout")
    p.add_argument("root")
    p.add_argument("--n-tasks", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-series", type=int, default=60)
    p.add_argument("--length", type=int, default=120)
    return parser


def load(args: argparse.Namespace) -> harness.ExperimentConfig:
    overrides = dict(_parse_set(s) for s in args.set)
    shortcuts = {
        "prepared_dir": args.prepared_dir,
        "output_dir": args.output_dir,
        "methods": args.methods,
        "seeds": args.seeds,
        "train.max_epochs": args.max_epochs,
        "train.clip": args.clip,
        "dataset_root": getattr(args, "dataset_root", None),
        "tasks": getattr(args, "tasks", None),
    }
    overrides |= {k: v for k, v in shortcuts.items() if v is not None}
    return harness.load_config(args.config, overrides)


def run(args: argparse.Namespace) -> None:
    if args.verb == "report":
        print(harness.report(args.output_dir))
        return
    if args.verb == "make-synthetic":
        tasks = make_corpus(args.n_tasks, args.seed, args.n_series, args.length)
        print(write_ucr_archive(args.root, tasks))
        return
    if args.verb == "evaluate" and args.manifest:
        cfg = harness.config_from_manifest(args.manifest, args.output_dir)
    else:
        cfg = load(args)

    if args.verb == "prepare":
        if not cfg.dataset_root:
            raise ConfigError(f"no dataset root: pass --dataset-root or set ${harness.DATA_ROOT_ENV}")
        tasks = prepare_archive(cfg.dataset_root, cfg.prepared_dir, cfg.data_seed, cfg.tasks)
        print(f"prepared {len(tasks)} tasks into {cfg.prepared_dir}")
    elif args.verb == "train":
        for (method, seed), secs in harness.train_methods(cfg).items():
            note = "no training" if secs is None else f"{secs:.1f}s"
            print(f"{method} seed {seed}: {note}")
    elif args.verb == "evaluate":
        table = harness.run_experiment(cfg)
        print(table.to_text())
        print(f"wrote {Path(cfg.output_dir) / 'results.csv'}")
    elif args.verb == "sweep":
        for row in harness.sweep(cfg, args.axis):
            print(f"{row['axis_value']:>4} {row['method']:<12} {row['mean_rmse']:.4f}")
    elif args.verb == "traces":
        print(harness.run_traces(cfg, args.method, args.task, args.seed, args.series))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("numeric error: %s", exc)
        return EXIT_NUMERIC
    except (FewShotError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
