"""Command-line entry point ``spice``.

Exit codes: 0 success, 2 invalid input (bad config, data or unwritable
output directory), 3 numerical failure.  Progress is written to standard
error as one JSON object per line.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import io, workflow
from .errors import NumericalError, SpiceError

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3


def _progress(event: dict) -> None:
    print(json.dumps(event, sort_keys=True), file=sys.stderr, flush=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spice", description="Bayesian calibration of explanatory IRT models.")
    sub = parser.add_subparsers(dest="command", required=True)

    cal = sub.add_parser("calibrate", help="run the sampler on a configured data set")
    cal.add_argument("--config", required=True, help="TOML run configuration")
    cal.add_argument("--seed", type=int, help="override sampler.seed")
    cal.add_argument("--chains", type=int, help="override sampler.n_chains")
    cal.add_argument(
        "--threads",
        type=int,
        help="worker threads per chain (default: sampler.worker_count, or SPICE_THREADS)",
    )
    cal.add_argument("--out", help="override output.dir")
    cal.add_argument("--progress-every", type=int, default=100, help="iterations between progress events")
    cal.add_argument("--quiet", action="store_true", help="no progress events")

    sim = sub.add_parser("simulate", help="generate a synthetic data set with known truth")
    sim.add_argument("--config", required=True, help="TOML simulation configuration")
    sim.add_argument("--out", required=True, help="directory for the generated files")
    sim.add_argument("--seed", type=int, help="override simulation.seed")
    sim.add_argument("--no-identify", action="store_true", help="do not fix person-block regressions in the emitted config")

    dia = sub.add_parser("diagnose", help="recompute summary and fit report from a finished run")
    dia.add_argument("run_dir", help="output directory of a calibrate run")
    dia.add_argument("--out", help="where to write (default: RUN_DIR/diagnose)")
    return parser


def _calibrate(args) -> int:
    overrides = {"seed": args.seed, "n_chains": args.chains, "worker_count": args.threads, "out": args.out}
    cfg = io.load_config(args.config, overrides)
    res = workflow.calibrate(cfg, None if args.quiet else _progress, args.progress_every)
    if not args.quiet:
        _progress({"done": True, "out": str(cfg.output_dir), "waic": res.fit.waic})
    return EXIT_OK


def _simulate(args) -> int:
    spec, raw = workflow.load_sim_spec(args.config)
    if args.seed is not None:
        spec.seed = args.seed
    out = workflow.simulate(spec, args.out, identify=not args.no_identify, sampler=raw.get("sampler"))
    _progress({"done": True, "out": str(out)})
    return EXIT_OK


def _diagnose(args) -> int:
    _, fit = workflow.diagnose(args.run_dir, args.out)
    _progress({"done": True, "waic": fit.waic})
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"calibrate": _calibrate, "simulate": _simulate, "diagnose": _diagnose}[args.command]
    try:
        return handler(args)
    except NumericalError as exc:
        print(f"spice: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (SpiceError, ValueError, OSError) as exc:
        print(f"spice: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
