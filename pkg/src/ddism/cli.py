"""Command-line interface.

Each stage subcommand reads the artifacts left in ``--out-dir`` by the previous
stage and refuses them when their recorded input hashes do not match. ``run``
executes every stage including the data-collection retries.

Exit codes: 0 all verdicts pass, 1 usage or configuration error, 2 synthesis or
composition infeasible, 3 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import pipeline as pl
from .config import ConfigError, desk_scale, resolve_config
from .experiment import DivergenceError, RichnessError
from .synthesis import CertificateValidationError, SolverFailure, SynthesisInfeasible

log = logging.getLogger("ddism")

OUT_DIR_ENV = "DDISM_OUT_DIR"


def _config(args):
    cfg = resolve_config(args.config)
    if args.topology is not None:
        cfg.network.topology = args.topology
        cfg.network.weight = None
    if args.n is not None:
        cfg.network.N = args.n
    if args.seed is not None:
        cfg.seed = args.seed
    if args.retries is not None:
        cfg.pipeline.retries = args.retries
    if args.parallel is not None:
        cfg.pipeline.parallel = args.parallel
    if args.no_reuse:
        cfg.pipeline.reuse = False
    if args.desk_scale:
        cfg = desk_scale(cfg)
    return cfg


def _out_dir(args) -> Path:
    return Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or "ddism-out")


def _print_row(run: pl.PipelineRun) -> None:
    print(pl.format_table([pl.report_row(run)]))


def cmd_run(args) -> int:
    run = pl.run_pipeline(_config(args), _out_dir(args))
    _print_row(run)
    if run.error:
        print(run.error, file=sys.stderr)
    for k, v in run.verdicts.items():
        print(f"{k}: {'pass' if v['passed'] else 'FAIL'}")
    return run.exit_code


def cmd_collect(args) -> int:
    cfg = _config(args)
    run = pl.new_run(cfg, _out_dir(args))
    last = ""
    for attempt in range(cfg.pipeline.retries + 1):
        try:
            pl.stage_collect(run, attempt)
            run.status["collect"] = "ok"
            break
        except (RichnessError, DivergenceError) as exc:
            last = str(exc)
            run.attempts.append({"attempt": attempt, "collect": last})
    else:
        run.status["collect"] = "infeasible"
        print(f"collect failed after {cfg.pipeline.retries} retries: {last}", file=sys.stderr)
        return pl.EXIT_INFEASIBLE
    pl.save_design(run)
    print(f"collected {len(run.data)} data set(s) into {run.out_dir}")
    return pl.EXIT_OK


def _load(args) -> pl.PipelineRun:
    return pl.load_run(_out_dir(args))


def cmd_synthesize(args) -> int:
    run = _load(args)
    if len(run.data) != len(run.groups):
        raise pl.StageError("synthesize", "no data; run `collect` first", pl.EXIT_CONFIG)
    try:
        pl.stage_synthesize(run)
    except (SynthesisInfeasible, SolverFailure, CertificateValidationError) as exc:
        run.status["synthesize"] = "infeasible"
        print(str(exc), file=sys.stderr)
        return pl.EXIT_INFEASIBLE
    run.status["synthesize"] = "ok"
    pl.save_design(run)
    for rep, c in run.rep_certs.items():
        print(f"subsystem {rep}: kappa={c.kappa:g} mu={c.mu:g} alpha1={c.alpha1:.4g} alpha2={c.alpha2:.4g} "
              f"rho={c.rho:.4g}")
    return pl.EXIT_OK


def cmd_ism(args) -> int:
    run = _load(args)
    if len(run.data) != len(run.groups):
        raise pl.StageError("ism", "no data; run `collect` first", pl.EXIT_CONFIG)
    pl.stage_ism(run)
    run.status["ism"] = "ok"
    pl.save_design(run)
    for rep, _ in run.groups:
        c = run.isms[rep]
        print(f"subsystem {rep}: C={c.C.tolist()} Theta={c.Theta:.6g}")
    return pl.EXIT_OK


def cmd_compose(args) -> int:
    run = _load(args)
    if not run.certs:
        raise pl.StageError("compose", "no certificates; run `synthesize` first", pl.EXIT_CONFIG)
    pl.stage_compose(run)
    ok = run.composition.feasible
    run.status["compose"] = "ok" if ok else "infeasible"
    pl.save_design(run)
    s = run.composition.summary()
    print(json.dumps(s, indent=1))
    return pl.EXIT_OK if ok else pl.EXIT_INFEASIBLE


def _require_composition(run: pl.PipelineRun, stage: str) -> None:
    if run.composition is None:
        raise pl.StageError(stage, "no composition; run `compose` first", pl.EXIT_CONFIG)
    if not run.composition.feasible:
        raise pl.StageError(stage, "network certificate is infeasible", pl.EXIT_INFEASIBLE)
    if run.config.sim.controllers == "iss_plus_ism" and not (run.isms and all(run.isms)):
        raise pl.StageError(stage, "no ISM design; run `ism` first", pl.EXIT_CONFIG)


def cmd_simulate(args) -> int:
    run = _load(args)
    _require_composition(run, "simulate")
    pl.stage_simulate(run)
    pl.save_logs(run)
    print(f"simulated {run.log.t[-1]:g} s; |x(0)|={run.log.norms[0]:.4g} |x(T)|={run.log.norms[-1]:.4g}"
          + (f"; {run.log.message}" if run.log.diverged else ""))
    return pl.EXIT_OK


def cmd_verify(args) -> int:
    run = _load(args)
    _require_composition(run, "verify")
    pl.load_logs(run)
    if run.log is None:
        raise pl.StageError("verify", "no simulation log; run `simulate` first", pl.EXIT_CONFIG)
    pl.stage_verify(run)
    pl.save_outputs(run)
    for k, v in run.verdicts.items():
        print(f"{k}: {'pass' if v['passed'] else 'FAIL'}")
    return run.exit_code


def cmd_report(args) -> int:
    dirs = [Path(d) for d in args.dirs] or [_out_dir(args)]
    rows = []
    for d in dirs:
        p = d / "report.json"
        if not p.exists():
            raise pl.StageError("report", f"{p} not found", pl.EXIT_CONFIG)
        rows.append(json.loads(p.read_text())["row"])
    print(pl.format_table(rows))
    return pl.EXIT_OK


COMMANDS = {"collect": cmd_collect, "synthesize": cmd_synthesize, "ism": cmd_ism, "compose": cmd_compose,
            "simulate": cmd_simulate, "verify": cmd_verify, "run": cmd_run, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="ring_desk", help="YAML path or built-in name (default: ring_desk)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", help=f"artifact directory (default: ${OUT_DIR_ENV} or ./ddism-out)")
    common.add_argument("--topology", choices=("fully_connected", "ring", "binary_tree", "star", "line", "custom"))
    common.add_argument("--n", type=int, help="number of subsystems")
    common.add_argument("--retries", type=int, help="data-collection retry budget")
    common.add_argument("--parallel", type=int, help="worker processes for per-subsystem stages")
    common.add_argument("--desk-scale", action="store_true", help="cap N at 10 and the horizon at 10 s")
    common.add_argument("--no-reuse", action="store_true", help="solve every subsystem separately")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ddism", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "report":
            p.add_argument("dirs", nargs="*", help="run directories (default: --out-dir)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return pl.EXIT_CONFIG if exc.code else pl.EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return pl.EXIT_CONFIG
    except (pl.ProvenanceError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return pl.EXIT_CONFIG
    except pl.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
