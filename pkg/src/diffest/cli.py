"""Command-line entry point: ``diffest {simulate,sweep,verify,tables}``.

Exit status is 0 on success, 2 when an acceptance check fails and 1 on any
error.  ``DIFFEST_OUT`` supplies the output directory when ``--out`` is not
given.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import SystemConfig
from .errors import ConfigError, DiffestError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FAILED_CHECK = 2
ENV_OUT = "DIFFEST_OUT"
DEFAULT_OUT = "diffest-out"

log = logging.getLogger("diffest")


def _out_dir(args, fallback: str = DEFAULT_OUT) -> Path:
    return Path(args.out or os.environ.get(ENV_OUT) or fallback)


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def cmd_simulate(args) -> int:
    from .estimator import ObservationSet, make_report
    from .rng import derive_seed
    from .sde_sim import simulate, write_csv, write_run

    cfg = SystemConfig.from_dict(_load_json(args.config))
    if args.master_seed is not None:
        cfg = cfg.replace(seed=derive_seed(args.master_seed, 0))
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    ens = simulate(cfg)
    provider = None
    if args.meanfield:
        from .meanfield import DensityField, solve_density
        if cfg.grid is None:
            raise DiffestError("--meanfield needs a 'grid' entry in the config")
        provider = solve_density(DensityField.from_initial(cfg.initial, cfg.grid), cfg)
    report = make_report(ObservationSet.from_ensemble(ens, provider=provider), args.gamma)
    stem = cfg.config_hash()
    write_run(ens, out / f"{stem}.run")
    if args.csv:
        write_csv(ens, out / f"{stem}.csv")
    (out / f"{stem}.report.json").write_text(report.to_json())
    print(f"nu_hat={report.nu_hat:.6g} nu_KN={report.nu_KN:.6g} -> {out / stem}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .harness import ExperimentPlan, run_plan

    data = _load_json(args.config)
    plan = ExperimentPlan.from_dict(data)
    changes = {"output_dir": str(_out_dir(args, plan.output_dir)), "parallelism": args.parallel}
    if args.master_seed is not None:
        changes["master_seed"] = args.master_seed
    plan = plan.replace(**changes)
    arts = run_plan(plan, force=args.force)
    n_new = sum(a.computed for a in arts)
    n_fail = sum(not a.ok for a in arts)
    print(f"{len(arts)} runs ({n_new} computed, {n_fail} failed) -> {plan.output_dir}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import acceptance

    numbers = None
    if args.criteria:
        try:
            numbers = {int(x) for x in args.criteria.split(",") if x.strip()}
        except ValueError as exc:
            raise ConfigError(f"--criteria expects comma-separated integers: {exc}") from exc
        known = {c.number for c in acceptance.CRITERIA}
        if not numbers <= known:
            raise ConfigError(f"unknown criteria {sorted(numbers - known)}; known {sorted(known)}")
    seed = acceptance.MASTER_SEED if args.master_seed is None else args.master_seed
    results = acceptance.run_all(numbers, acceptance.Context(seed))
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    payload = [{"number": r.number, "title": r.title, "passed": r.passed, "summary": r.summary,
                "seconds": r.seconds, "details": r.details} for r in results]
    (out / "acceptance.json").write_text(json.dumps(payload, indent=2, default=float))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED_CHECK


def cmd_tables(args) -> int:
    from .harness import emit_tables, load_artifacts

    out = _out_dir(args)
    grouping = [g.strip() for g in args.group.split(",") if g.strip()]
    table = emit_tables(load_artifacts(out), grouping)
    name = "table_" + "_".join(grouping)
    (out / f"{name}.csv").write_text(table.to_csv())
    (out / f"{name}.fits.json").write_text(json.dumps(table.fits, indent=2))
    sys.stdout.write(table.to_csv())
    for col, fit in table.fits.items():
        print(f"# slope[{col}] = {fit['slope']:.4f} (r^2 {fit['r_squared']:.4f})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffest", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required):
        sp.add_argument("--config", required=config_required, help="JSON config or plan file")
        sp.add_argument("--out", default=None, help=f"output directory (env {ENV_OUT})")
        sp.add_argument("--parallel", type=int, default=1, help="worker processes")
        sp.add_argument("--force", action="store_true", help="recompute completed runs")
        sp.add_argument("--master-seed", type=int, default=None, help="unsigned 64-bit master seed")

    sp = sub.add_parser("simulate", help="run one configuration")
    common(sp, True)
    sp.add_argument("--meanfield", action="store_true", help="solve the density and report I2, I3")
    sp.add_argument("--csv", action="store_true", help="also write positions as CSV")
    sp.add_argument("--gamma", type=float, default=0.1)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep", help="execute an experiment plan")
    common(sp, True)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("verify", help="run the acceptance suite")
    common(sp, False)
    sp.add_argument("--criteria", default="", help="comma-separated subset, e.g. 1,2,10")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("tables", help="summarize sweep artifacts")
    common(sp, False)
    sp.add_argument("--group", default="dt", help="comma-separated config fields to group by")
    sp.set_defaults(func=cmd_tables)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.master_seed is not None and not 0 <= args.master_seed < 2**64:
        log.error("--master-seed must be an unsigned 64-bit integer")
        return EXIT_ERROR
    if args.parallel < 1:
        log.error("--parallel must be >= 1")
        return EXIT_ERROR
    try:
        return args.func(args)
    except (DiffestError, OSError, json.JSONDecodeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
