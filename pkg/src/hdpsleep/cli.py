"""Command-line entry point: ``hdpsleep <verb> ...``.

Exit codes: 0 ok, 2 validation error, 3 numerical failure, 4 invariant violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import pipeline
from .config import RunConfig
from .inference import InvariantError, NumericalError

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_INVARIANT = 0, 2, 3, 4

log = logging.getLogger("hdpsleep")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hdpsleep", description="Oscillatory state discovery pipeline")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("simulate", help="simulate the built-in five-stage fixture")
    s.add_argument("--out", required=True)
    s.add_argument("--subject", default="S1")
    s.add_argument("--T", type=int, default=2000, help="number of windows")
    s.add_argument("--fs", type=float, default=200.0)
    s.add_argument("--window-seconds", type=float, default=15.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", choices=("csv", "f32"), default="csv")

    for verb, text in (("spectra", "multitaper band observations"), ("infer", "run the HDP-HMM sampler"),
                       ("cluster", "cluster states across subjects"), ("report", "evaluation bundle")):
        v = sub.add_parser(verb, help=text)
        v.add_argument("config", help="run config (JSON)")
        if verb != "cluster":
            v.add_argument("--subject", action="append", help="restrict to a subject (repeatable)")
        if verb in ("spectra", "infer"):
            v.add_argument("--jobs", type=int, default=1, help="subjects processed in parallel")
        if verb == "infer":
            v.add_argument("--fresh", action="store_true", help="discard an existing checkpoint")
            v.add_argument("--stop-at", type=int, default=None, help="pause after this many sweeps")

    d = sub.add_parser("demo", help="simulate two subjects and run every stage")
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)
    return p


def _dispatch(args) -> object:
    if args.verb == "simulate":
        return pipeline.cmd_simulate(args.out, args.subject, args.T, args.fs, args.window_seconds, args.seed,
                                     args.format)
    if args.verb == "demo":
        return pipeline.cmd_demo(args.out, seed=args.seed)
    cfg = RunConfig.load(args.config)
    if args.verb == "spectra":
        return pipeline.cmd_spectra(cfg, args.subject, jobs=args.jobs)
    if args.verb == "infer":
        return pipeline.cmd_infer(cfg, args.subject, jobs=args.jobs, stop_at=args.stop_at, fresh=args.fresh)
    if args.verb == "cluster":
        m = pipeline.cmd_cluster(cfg)
        return {"C": m["C"], "distortion": m["distortion"], "n_states": len(m["states"])}
    return pipeline.cmd_report(cfg, args.subject)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with np.errstate(over="ignore", under="ignore"):
            result = _dispatch(args)
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if args.verb in ("simulate", "cluster"):
        print(json.dumps(result, sort_keys=True, default=str)[:2000])
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
