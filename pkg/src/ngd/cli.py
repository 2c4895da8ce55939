"""Command-line entry point: ``ngd {gen-data,run,sweep-degree,diagnose,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiment
from .errors import (
    ConfigError,
    Diverged,
    InvalidArgument,
    NumericalFailure,
    NumericOverflow,
    SchemaVersionMismatch,
    SingularMatrix,
    SolverFailure,
    TopologyGenerationFailure,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("ngd")


def _configs(args) -> tuple[list[experiment.ExperimentConfig], dict]:
    configs, extra = experiment.load_configs(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["base_seed"] = args.seed
    if args.record_every is not None:
        overrides["record_every"] = args.record_every
    if overrides:
        configs = [replace(c, **overrides) for c in configs]
    return configs, extra


def _targets(configs, out: Path):
    if len(configs) == 1:
        return [(configs[0], out)]
    return [(c, out / c.tag()) for c in configs]


def _require_out(args) -> Path:
    if args.out is None:
        raise ConfigError(f"{args.command} needs --out")
    return Path(args.out)


def cmd_gen_data(args) -> int:
    configs, _ = _configs(args)
    for cfg, path in _targets(configs, _require_out(args)):
        info = experiment.gen_data(cfg, path)
        print(f"{path}\t{info['dataset_digest']}")
    return EXIT_OK


def cmd_run(args) -> int:
    configs, _ = _configs(args)
    for cfg, path in _targets(configs, _require_out(args)):
        log.info("running %s -> %s", cfg.tag(), path)
        experiment.run_experiment(cfg, path, workers=args.workers)
        print(path)
    return EXIT_OK


def cmd_sweep_degree(args) -> int:
    configs, extra = _configs(args)
    if args.degrees:
        degrees = [int(d) for d in args.degrees.split(",")]
    else:
        degrees = extra.get("degrees")
    if not degrees:
        raise ConfigError("sweep-degree needs --degrees or a [sweep] degrees entry")
    for cfg, path in _targets(configs, _require_out(args)):
        experiment.sweep_degree(cfg, degrees, path, workers=args.workers, alpha=args.alpha)
        print(path)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    configs, _ = _configs(args)
    reports = [experiment.diagnose(c) for c in configs]
    payload = reports[0] if len(reports) == 1 else reports
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "diagnose.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_report(args) -> int:
    summary = experiment.report(args.results, _require_out(args))
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ngd", description="Network gradient descent simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="INI experiment config")
            p.add_argument("--seed", type=int, help="override base_seed")
            p.add_argument("--record-every", type=int, dest="record_every")
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, default=1)
        return p

    common(sub.add_parser("gen-data", help="write one replicate's dataset, partition and graph")).set_defaults(
        func=cmd_gen_data
    )
    common(sub.add_parser("run", help="simulate every (alpha, replicate)")).set_defaults(func=cmd_run)
    sw = common(sub.add_parser("sweep-degree", help="fixed-degree runs across in-degrees"))
    sw.add_argument("--degrees", help="comma-separated degrees, e.g. 1,2,4,6,8")
    sw.add_argument("--alpha", type=float, help="override the per-model learning rate")
    sw.set_defaults(func=cmd_sweep_degree)
    common(sub.add_parser("diagnose", help="balance, curvature and spectral report")).set_defaults(
        func=cmd_diagnose
    )
    rp = common(sub.add_parser("report", help="merge result directories into summary tables"), config=False)
    rp.add_argument("results", nargs="+", help="result directories or manifest.json files")
    rp.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, InvalidArgument, SchemaVersionMismatch, TopologyGenerationFailure) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, NumericOverflow, SingularMatrix, SolverFailure, Diverged) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
