"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 validation, 2 computation, 3 I/O.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import adherence, pipeline
from .errors import ComputationError, ContractError, LmAdherenceError, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_COMPUTATION, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("lmadherence")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="pipeline config (JSON)")
    common.add_argument("--seed", type=_u64, help="overrides the config seed")
    common.add_argument("--threads", type=_positive, help="worker cap (default 1)")
    common.add_argument("--output", type=Path, help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lmadherence", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", parents=[common], help="write a synthetic cohort")
    p.add_argument("--n-patients", type=int, help="overrides the simulator cohort size")
    sub.add_parser("adherence", parents=[common], help="write the monthly adherence panel")
    sub.add_parser("fit", parents=[common], help="model selection and the best model")
    p = sub.add_parser("profile", parents=[common], help="decode paths and count profiles")
    p.add_argument("--model", type=Path, help="model document (default <output>/model.json)")
    p = sub.add_parser("survival", parents=[common], help="KM, log-rank, Cox and RMST by profile")
    p.add_argument("--profiles", type=Path, help="profile labels (default <output>/profiles.csv)")
    sub.add_parser("report", parents=[common], help="collect stage outputs into report.json")
    return parser


def _dispatch(args) -> None:
    cfg = pipeline.load_config(args.config, seed=args.seed, output=args.output, threads=args.threads)
    out = cfg.output
    if args.command == "simulate":
        if args.n_patients is not None and args.n_patients < 1:
            raise ValidationError(f"n_patients must be >= 1, got {args.n_patients}")
        sim, summary = pipeline.run_simulate(cfg, args.n_patients)
        pipeline.write_simulate(cfg, sim)
        print(summary)
        return
    if args.command == "report":
        report, summary = pipeline.run_report(cfg)
        pipeline.write_json(report, out / "report.json")
        print(summary)
        return

    model_path = getattr(args, "model", None) or out / "model.json"
    profiles_path = getattr(args, "profiles", None) or out / "profiles.csv"
    if args.command == "profile":
        cfg.require_inputs(model_path)
    if args.command == "survival":
        cfg.require_inputs(profiles_path)
    c = pipeline.build_cohort(cfg)
    print(pipeline.cohort_summary(c))
    if args.command == "adherence":
        out.mkdir(parents=True, exist_ok=True)
        adherence.write_panel_csv(c.panels, out / "panel.csv")
    elif args.command == "fit":
        result = pipeline.run_fit(cfg, c)
        pipeline.write_fit(cfg, result)
        for row in result.rows:
            mark = " *" if row.selected else ""
            print(f"{row.label} k={row.spec.k} cov={row.describe()} g={row.g} "
                  f"loglik={row.loglik} bic={row.bic} {row.status}{mark}")
        print(f"selected k = {result.chosen_k}")
    elif args.command == "profile":
        run = pipeline.run_profile(cfg, c, model_path)
        pipeline.write_profile(cfg, run)
        kept = [lab for lab, r in run.table.retained.items() if r]
        print("profiles: " + ", ".join(f"{k}={v}" for k, v in run.table.counts.items()) +
              f"; retained {kept}")
    elif args.command == "survival":
        run = pipeline.run_survival(cfg, c, profiles_path)
        pipeline.write_survival(cfg, run)
        lr = run.report["logrank"]
        print(f"log-rank chi2={lr['statistic']:.3f} df={lr['df']} p={lr['p_value_text']}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except (ValidationError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ComputationError, LmAdherenceError) as exc:
        print(f"computation error: {exc}", file=sys.stderr)
        return EXIT_COMPUTATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
