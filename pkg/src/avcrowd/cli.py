"""Command-line interface.

Exit codes: 0 success, 1 failed gradient check, 2 configuration error,
3 equilibrium or optimizer non-convergence, 4 unattainable profit floor.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .equilibrium import NonConvergenceError
from .scenarios import InfeasibleFloorError, OptimizationAborted

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_INFEASIBLE = 0, 1, 2, 3, 4


def _load(args) -> harness.ExperimentConfig:
    if args.config:
        return harness.load_config(args.config)
    return harness.derive_default_config()


def cmd_default_config(args) -> int:
    text = harness.dump_config(harness.derive_default_config())
    if args.output:
        harness.write_atomic(Path(args.output), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_solve(args) -> int:
    config = _load(args)
    states = harness.solve_prices(config, args.fare, args.payment)
    market = harness.market_config(config)
    rows = [harness.equilibrium_row(s, p, "solve") for s, p in zip(states, market.periods)]
    text = harness.csv_text(harness.EQUILIBRIUM_COLUMNS, rows)
    out = harness.resolve_output_dir(config, args.output_dir)
    harness.write_atomic(out / "solve_equilibrium.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_optimize(args) -> int:
    config = _load(args)
    result = harness.run(config, args.scenario, args.output_dir, rho=args.rho)
    market = harness.market_config(config)
    row = harness.summary_row(result, market)
    sys.stdout.write(harness.csv_text(harness.summary_columns(market), [row]))
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _load(args)
    spec = config.sweep(args.param)
    if args.grid or args.scenarios or spec is None:
        if not args.grid and spec is None:
            raise harness.ConfigError(f"no sweep for {args.param!r} in the config; pass --grid")
        grid = args.grid or spec.grid
        scenarios = args.scenarios or (spec.scenarios if spec else ("monopoly", "first_best"))
        overrides = spec.overrides if spec else {}
        try:
            spec = harness.SweepSpec(args.param, tuple(grid), tuple(scenarios), overrides)
        except ValueError as exc:
            raise harness.ConfigError(str(exc)) from exc
    rows = harness.sweep(config, spec, args.output_dir, jobs=args.jobs)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} rows written for sweep over {spec.parameter} ({failed} not ok)")
    return EXIT_OK


def cmd_check_gradients(args) -> int:
    config = _load(args)
    checks = harness.check_gradients(config, points=args.points, seed=args.seed)
    worst = 0.0
    for c in checks:
        worst = max(worst, c.relative_error)
        print(f"{c.objective:<10} prices={[round(v, 3) for v in c.prices]} "
              f"rel_err={c.relative_error:.3e}")
    ok = worst <= args.tolerance
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAILED'}, tolerance {args.tolerance:g})")
    return EXIT_OK if ok else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avcrowd", description="Equilibrium and pricing of an AV crowdsourcing mobility market.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML experiment config (default: built-in reference city)")
        p.add_argument("--output-dir", help=f"output directory (overrides ${harness.OUTPUT_DIR_ENV})")

    p = sub.add_parser("default-config", help="print the reference configuration as YAML")
    p.add_argument("-o", "--output", help="write to this file instead of stdout")
    p.set_defaults(func=cmd_default_config)

    p = sub.add_parser("solve", help="equilibrium at given prices")
    common(p)
    p.add_argument("--fare", type=float, nargs="+", required=True,
                   help="on-demand fare per period ($/trip); one value applies to all periods")
    p.add_argument("--payment", type=float, nargs="+", required=True,
                   help="owner payment per period ($/ride)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("optimize", help="optimal prices for a scenario")
    common(p)
    p.add_argument("--scenario", required=True, choices=["monopoly", "first-best", "second-best"])
    p.add_argument("--rho", type=float, help="profit-floor rate for second-best")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("sweep", help="sensitivity sweep over one parameter")
    common(p)
    p.add_argument("--param", required=True, choices=sorted(harness.SWEEP_PARAMETERS))
    p.add_argument("--grid", type=float, nargs="+", help="values (default: the config's sweep)")
    p.add_argument("--scenarios", nargs="+",
                   choices=["monopoly", "first-best", "second-best",
                            "first_best", "second_best"])
    p.add_argument("--jobs", type=int, default=1, help="parallel grid points")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("check-gradients", help="analytic vs finite-difference objective gradients")
    common(p)
    p.add_argument("--points", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(func=cmd_check_gradients)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleFloorError as exc:
        print(f"infeasible profit floor: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (NonConvergenceError, OptimizationAborted) as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
