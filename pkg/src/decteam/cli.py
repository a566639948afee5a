"""Command-line front end.

Exit codes: 0 success, 2 invalid config, 3 solver failure (non-convergence,
singular fixed point, integration blowup), 4 verification failure.
"""

from __future__ import annotations

import argparse
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, config_digest, load_config
from .errors import DecTeamError, FixedPointSingular, IntegrationBlowup, NonConvergence, NumericalDegeneracy, SpecError
from .export import covariance_csv, ensemble_csv, schedule_csv, strategy_csv, to_json
from .filters import build_filter_bank
from .integrators import simulate_broadcast, simulate_ensemble
from .model import BroadcastSpec
from .optimality import STAT_SIGMAS, adjoint_consistency_check, closure_cost_report, verify_person_by_person
from .solvers import (centralized_spec, oracle_lqg, solve_broadcast_team, solve_filtering_team, solve_lq_team,
                      solve_lq_team_n)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4

SUBCOMMANDS = ("solve-broadcast", "solve-lq-team", "solve-filtering", "simulate", "verify", "oracle-lqg")
EXPECTED = {"solve-broadcast": ("broadcast",), "solve-lq-team": ("lq_team",), "solve-filtering": ("filtering_team",),
            "oracle-lqg": ("lq_team", "filtering_team")}


class _Outputs:
    """Collects files and writes them under the output directory only."""

    def __init__(self, root: Path):
        self.root = root
        self.files = {}

    def add(self, name: str, text: str):
        self.files[name] = text

    def flush(self):
        self.root.mkdir(parents=True, exist_ok=True)
        for name, text in sorted(self.files.items()):
            (self.root / name).write_text(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decteam", description="Decentralized LQ team solver and verifier")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="scenario config (JSON)")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--paths", type=int, default=None)
        s.add_argument("--dt", type=float, default=None, help="override the grid step")
        s.add_argument("--format", choices=("csv", "json"), default="json")
        s.add_argument("--tol", type=float, default=None, help="fixed-point tolerance")
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("--layout", choices=("long", "per-path"), default="long")
    return p


def _solve(sc, tol):
    opts = dict(sc.solver)
    if tol is not None:
        opts["tol"] = tol
    if sc.kind == "broadcast":
        return solve_broadcast_team(sc.spec, sc.grid)
    if sc.kind == "filtering_team":
        return solve_filtering_team(sc.spec, sc.grid)
    kw = {k: opts[k] for k in ("tol", "max_iter", "damping") if k in opts}
    if sc.spec.N > 2:
        return solve_lq_team_n(sc.spec, sc.grid, **kw)
    return solve_lq_team(sc.spec, sc.grid, **kw)


def _write_solution(out, strategy, report, grid, fmt):
    t = grid.nodes
    out.add("strategy.csv", strategy_csv(strategy, t))
    if fmt == "json":
        out.add("report.json", to_json(report.to_dict(include_schedules=True)))
        return
    out.add("report.json", to_json(report.summary()))
    for i, K in enumerate(report.riccati, start=1):
        out.add(f"riccati_dm{i}.csv", schedule_csv("K", K, t))
    for i, r in enumerate(report.offsets, start=1):
        out.add(f"offset_dm{i}.csv", schedule_csv("r", r, t))
    for i, P in enumerate(report.filter_covariances, start=1):
        out.add(f"covariance_dm{i}.csv", covariance_csv(P, t))
    if report.mean_state is not None:
        out.add("mean_state.csv", schedule_csv("xbar", report.mean_state, t))


def _run(args, out) -> int:
    sc = load_config(args.config, dt=args.dt)
    allowed = EXPECTED.get(args.command)
    if allowed and sc.kind not in allowed:
        raise ConfigError(f"{args.command} needs scenario {' or '.join(allowed)}, config has '{sc.kind}'")
    if args.command == "oracle-lqg":
        spec = centralized_spec(sc.spec)
        strategy, report = oracle_lqg(spec, sc.grid)
        _write_solution(out, strategy, report, sc.grid, args.format)
        return EXIT_OK
    strategy, report = _solve(sc, args.tol)
    if args.command.startswith("solve-"):
        _write_solution(out, strategy, report, sc.grid, args.format)
        return EXIT_OK
    if args.command == "simulate":
        paths = 10 if args.paths is None else args.paths
        if isinstance(sc.spec, BroadcastSpec):
            ens = simulate_broadcast(sc.spec, sc.grid, strategy, seed=args.seed, num_paths=paths, record=True,
                                     threads=args.threads)
        else:
            bank = build_filter_bank(sc.spec, sc.grid, strategy.mean_control)
            ens = simulate_ensemble(sc.spec, sc.grid, strategy, bank, seed=args.seed, num_paths=paths, record=True,
                                    threads=args.threads)
        for name, text in ensemble_csv(ens, sc.grid.nodes, layout=args.layout).items():
            out.add(name, text)
        out.add("summary.json", to_json({"paths": paths, "J": ens.mean_cost, "J_se": ens.cost_se}))
        return EXIT_OK
    # verify
    paths = 2000 if args.paths is None else args.paths
    rep = verify_person_by_person(sc.spec, strategy, sc.grid, paths, args.seed, report=report,
                                  threads=args.threads)
    if not isinstance(sc.spec, BroadcastSpec):
        adj = adjoint_consistency_check(sc.spec, sc.grid, strategy)
        for key in ("residuals", "beta", "psi"):
            adj.pop(key)
        rep.adjoint = adj
        rep.checks["adjoint"] = {"pass": adj["pass"]}
        for dm, g in rep.gradient_norms.items():
            rep.checks[f"stationarity_{dm}"] = {"pass": g["pass"]}
        if sc.spec.N > 1:
            clo = closure_cost_report(sc.spec, strategy, sc.grid, paths, args.seed, threads=args.threads)
            rep.closure = clo
            if clo["regime"] == "uncontrolled":
                ok = all(abs(e["gap"]) <= STAT_SIGMAS * e["se"] or e["gap"] == 0.0 for e in clo["dms"])
                rep.checks["closure_gap_uncontrolled"] = {"pass": bool(ok)}
    out.add("verification.json", to_json(rep.to_dict()))
    out.add("verification.csv", rep.to_csv())
    return EXIT_OK if rep.passed else EXIT_VERIFY


def _manifest(args, status, files) -> str:
    try:
        digest = config_digest(args.config)
    except OSError:
        digest = None
    try:
        sc_grid = load_config(args.config, dt=args.dt).grid
        grid = {"T": sc_grid.T, "dt": sc_grid.dt, "num_steps": sc_grid.num_steps}
    except DecTeamError:
        grid = None
    return to_json({
        "subcommand": args.command,
        "config_sha256": digest,
        "seed": args.seed,
        "paths": args.paths,
        "grid": grid,
        "exit_code": status,
        "outputs": sorted(files),
        "versions": {
            "decteam": __version__,
            "numpy": np.__version__,
            "python": ".".join(platform.python_version_tuple()[:2]),
        },
    })


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = _Outputs(Path(args.out))
    try:
        status = _run(args, out)
    except (ConfigError, SpecError) as exc:
        status = EXIT_CONFIG
        out.files.clear()
        out.add("diagnostic.json", to_json({"exit_code": status, "error": type(exc).__name__, "message": str(exc)}))
    except (NonConvergence, FixedPointSingular, IntegrationBlowup, NumericalDegeneracy) as exc:
        status = EXIT_SOLVER
        out.files.clear()
        diag = {"exit_code": status, "error": type(exc).__name__, "message": str(exc)}
        for attr in ("node", "cond", "min_eig", "residuals"):
            if hasattr(exc, attr):
                diag[attr] = getattr(exc, attr)
        out.add("diagnostic.json", to_json(diag))
    if status == EXIT_VERIFY:
        out.add("diagnostic.json", to_json({"exit_code": status, "error": "VerificationFailure",
                                             "message": "at least one verification entry failed"}))
    out.add("manifest.json", _manifest(args, status, list(out.files) + ["manifest.json"]))
    out.flush()
    print(f"{args.command}: exit {status}; outputs in {args.out}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
