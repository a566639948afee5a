"""The ten acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line, repeated in the terminal summary.
"""

import filecmp
import time
from pathlib import Path

import numpy as np

from decteam import cli
from decteam.filters import build_filter_bank, kalman_riccati, static_channel_covariance
from decteam.integrators import simulate_ensemble
from decteam.model import TimeGrid
from decteam.optimality import (adjoint_consistency_check, closure_cost_report, stationarity,
                                verify_person_by_person)
from decteam.riccati import solve_riccati
from decteam.solvers import oracle_lqg, solve_broadcast_team, solve_filtering_team, solve_lq_team

from scenarios import (broadcast_two_dm, coupled_two_dm, filtering_two_dm, single_dm, uncontrolled_coupled_two_dm,
                       unit_grid)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SIGMAS = 4.0


def test_riccati_oracle(acceptance_line):
    I, Z = np.eye(1), np.zeros((1, 1))
    t0 = time.perf_counter()
    K0 = solve_riccati(Z, I, I, I, Z, TimeGrid(1.0, 1e-3)).K[0, 0, 0]
    elapsed = time.perf_counter() - t0
    err = abs(K0 - np.tanh(1.0))
    ok = err <= 1e-6 and elapsed < 1.0
    acceptance_line(1, "Riccati oracle", ok, f"|K(0)-tanh 1|={err:.1e}, {elapsed:.2f}s")
    assert ok


def test_filter_oracles(acceptance_line):
    P = static_channel_covariance(broadcast_two_dm(), 0, unit_grid())[-1, 0, 0]
    I = np.eye(1)
    Pkb = kalman_riccati(-I, I, I, I, np.zeros((1, 1)), TimeGrid(10.0, 1e-3))[-1, 0, 0]
    e1, e2 = abs(P - 0.5), abs(Pkb - (np.sqrt(2) - 1))
    ok = e1 <= 1e-6 and e2 <= 1e-4
    acceptance_line(2, "static-channel and Kalman-Bucy oracles", ok, f"errors {e1:.1e}, {e2:.1e}")
    assert ok


def test_broadcast_fixed_point(acceptance_line, tmp_path):
    spec = broadcast_two_dm(R=((1.0, 0.5), (0.5, 1.0)), m=(1.0, 1.0))
    strat, _ = solve_broadcast_team(spec, unit_grid())
    err = float(np.max(np.abs(strat.mean_control + 2.0 / 3.0)))
    code = cli.main(["solve-broadcast", "--config", str(CONFIGS / "broadcast_two_dm.json"), "--out", str(tmp_path)])
    ok = err <= 1e-9 and code == 0
    acceptance_line(3, "broadcast fixed point", ok, f"max |ubar+2/3|={err:.1e}, exit {code}")
    assert ok


def test_single_dm_reduction(acceptance_line):
    spec = single_dm(0)
    g = unit_grid()
    t0 = time.perf_counter()
    team, _ = solve_lq_team(spec, g)
    ref, _ = oracle_lqg(spec, g)
    elapsed = time.perf_counter() - t0
    err = float(np.max(np.abs(team.gains[0] - ref.gains[0])))
    ok = err <= 1e-8 and elapsed < 5.0
    acceptance_line(4, "single-DM reduction to centralized LQG", ok, f"gain error {err:.1e}, {elapsed:.2f}s")
    assert ok


def test_person_by_person_dominance(acceptance_line):
    spec = coupled_two_dm()
    g = unit_grid(1e-3)
    t0 = time.perf_counter()
    strat, report = solve_lq_team(spec, g)
    rep = verify_person_by_person(spec, strat, g, 10_000, seed=20240601, report=report)
    elapsed = time.perf_counter() - t0
    all_pass = all(e["pass"] for e in rep.entries)
    gain = [e for e in rep.entries if e["perturbation"].startswith("gain")]
    strict = all(e["dJ"] > SIGMAS * e["se"] for e in gain)
    worst = min(e["dJ"] / e["se"] for e in gain)
    ok = len(rep.entries) == 12 and all_pass and strict and elapsed < 120
    acceptance_line(5, "person-by-person battery", ok, f"min gain dJ/SE={worst:.1f}, {elapsed:.0f}s")
    assert ok, rep.to_csv()


def test_stationarity(acceptance_line):
    g = unit_grid()
    norms = {}
    for name, spec, solver in (("lq_team", coupled_two_dm(), solve_lq_team),
                               ("filtering_team", filtering_two_dm(), solve_filtering_team)):
        strat, report = solver(spec, g)
        norms[name] = stationarity(spec, strat, report, g)
    ok = all(v["pass"] for st in norms.values() for v in st.values())
    worst = max(max(v["coefficient"], v["constant"]) / v["scale"] for st in norms.values() for v in st.values())
    acceptance_line(6, "stationarity of the conditional gradient", ok, f"max norm/scale={worst:.1e}")
    assert ok


def test_adjoint_consistency(acceptance_line):
    spec = coupled_two_dm().replace(G=np.zeros((4, 4)))
    g = unit_grid()
    strat, _ = solve_lq_team(spec, g)
    out = adjoint_consistency_check(spec, g, strat)
    ok = (out["max_ito_residual"] <= 10 * g.dt and out["terminal_residual"] <= 1e-8 and out["q11_defect"] == 0.0)
    acceptance_line(7, "adjoint consistency", ok,
                    f"Ito residual {out['max_ito_residual']:.1e} <= {10 * g.dt:.0e}, terminal {out['terminal_residual']:.1e}")
    assert ok and out["pass"]


def test_filter_statistics(acceptance_line):
    spec = filtering_two_dm()
    g = unit_grid()
    strat, _ = solve_filtering_team(spec, g)
    bank = build_filter_bank(spec, g, strat.mean_control)
    P = 10_000
    ens = simulate_ensemble(spec, g, strat, bank, seed=7, num_paths=P)
    worst_mean = worst_cross = 0.0
    innov_err = 0.0
    for i in range(spec.N):
        xh = ens.xhat_final[i]
        err = ens.x_final - xh
        z = np.abs(err.mean(axis=0)) / (err.std(axis=0, ddof=1) / np.sqrt(P))
        worst_mean = max(worst_mean, float(z.max()))
        prod = err[:, :, None] * (xh - xh.mean(axis=0))[:, None, :]
        zc = np.abs(prod.mean(axis=0)) / (prod.std(axis=0, ddof=1) / np.sqrt(P))
        worst_cross = max(worst_cross, float(zc.max()))
        D = spec.D[spec.obs_slice(i), spec.obs_slice(i)]
        v = np.cov(ens.innovation_total[i].T, ddof=1).reshape(D.shape)
        innov_err = max(innov_err, float(np.max(np.abs(v - D * g.T) / np.abs(np.diag(D) * g.T))))
    ok = worst_mean <= SIGMAS and worst_cross <= SIGMAS and innov_err <= 0.05
    acceptance_line(8, "filter statistics", ok,
                    f"error mean {worst_mean:.1f} SE, cross-cov {worst_cross:.1f} SE, innovation var {innov_err:.1%}")
    assert ok


def test_closure_cost_report(acceptance_line):
    g = unit_grid()
    paths = 4000
    spec = coupled_two_dm()
    strat, _ = solve_lq_team(spec, g)
    coupled = closure_cost_report(spec, strat, g, paths, seed=3)
    plain = uncontrolled_coupled_two_dm()
    strat0, _ = solve_lq_team(plain, g)
    uncontrolled = closure_cost_report(plain, strat0, g, paths, seed=3)
    quantified = coupled["regime"] == "controlled" and all(
        np.isfinite(e["gap"]) and np.isfinite(e["se"]) and np.isfinite(e["exact_gap"]) for e in coupled["dms"])
    vanishes = uncontrolled["regime"] == "uncontrolled" and all(
        abs(e["gap"]) <= SIGMAS * e["se"] or e["gap"] == 0.0 for e in uncontrolled["dms"])
    ok = quantified and vanishes
    gaps = ", ".join(f"dm{e['dm']} {e['gap']:+.2e}+-{e['se']:.1e}" for e in coupled["dms"])
    acceptance_line(9, "moment-closure cost report (internal consistency)", ok,
                    f"coupled gaps {gaps}; B=0 gaps {[e['gap'] for e in uncontrolled['dms']]}")
    assert ok


def test_cli_determinism(acceptance_line, tmp_path):
    runs = [
        ["solve-broadcast", "--config", "broadcast_two_dm"],
        ["solve-lq-team", "--config", "coupled_two_dm", "--format", "csv"],
        ["solve-filtering", "--config", "filtering_two_dm"],
        ["oracle-lqg", "--config", "single_dm"],
        ["simulate", "--config", "coupled_two_dm", "--paths", "5", "--seed", "11"],
        ["verify", "--config", "filtering_two_dm", "--paths", "200", "--seed", "11"],
    ]
    mismatched = []
    for args in runs:
        args = list(args)
        args[2] = str(CONFIGS / f"{args[2]}.json")
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{args[0]}_{rep}"
            assert cli.main(args + ["--out", str(out)]) == 0
            outs.append(out)
        names = sorted(p.name for p in outs[0].iterdir())
        same = names == sorted(p.name for p in outs[1].iterdir())
        _, bad, errs = filecmp.cmpfiles(outs[0], outs[1], names, shallow=False)
        if not same or bad or errs:
            mismatched.append(args[0])
    ok = not mismatched
    acceptance_line(10, "byte-identical CLI outputs", ok, f"{len(runs)} subcommands" + (f"; differ: {mismatched}" if mismatched else ""))
    assert ok
