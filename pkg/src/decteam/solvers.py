"""End-to-end team solvers: broadcast channel, LQ team, filtering team, and a
centralized LQG reference."""

from __future__ import annotations

import numpy as np

from .errors import FixedPointSingular, SpecError
from .filters import MOMENT_CLOSURE, build_filter_bank, kalman_riccati, static_channel_covariance
from .integrators import rk4_backward, rk4_forward
from .model import BroadcastSpec, DecentralizedStrategy, LqTeamSpec, Schedule, SolverReport, TimeGrid, validate_spec
from .riccati import COND_LIMIT, mean_field_fixed_point, solve_dm_riccatis, solve_riccati


def _require_valid(spec, grid):
    outcome = validate_spec(spec, grid)
    if not outcome.ok:
        raise SpecError("; ".join(outcome.violations))


def _tab(spec, name, grid):
    return np.asarray(spec.schedule(name, grid).table())


def normalized_coupling(R: np.ndarray, d_blocks) -> np.ndarray:
    """``diag(R_ii^{-1}) R`` for a stack of weight matrices ``(nodes, d, d)``."""
    offs = np.concatenate([[0], np.cumsum(d_blocks)]).astype(int)
    rows = []
    for a, b in zip(offs[:-1], offs[1:]):
        rows.append(np.linalg.solve(R[:, a:b, a:b], R[:, a:b, :]))
    return np.concatenate(rows, axis=1)


def _checked_coupling(R, d_blocks):
    Lam = normalized_coupling(R, d_blocks)
    cond = np.linalg.cond(Lam)
    bad = np.flatnonzero(~(cond <= COND_LIMIT))
    if bad.size:
        raise FixedPointSingular(int(bad[0]), cond[bad[0]])
    return Lam, cond


def _cross_offsets(spec, R, ubar, base):
    """Offsets ``-R_ii^{-1}(base_i + sum_{j!=i} R_ij ubar_j)`` per DM."""
    out = []
    for i in range(spec.N):
        s = spec.control_slice(i)
        v = np.array(base[i])
        for j in range(spec.N):
            if j != i:
                sj = spec.control_slice(j)
                v += np.einsum("kab,kb->ka", R[:, s, sj], ubar[:, sj])
        out.append(-np.linalg.solve(R[:, s, s], v[..., None])[..., 0])
    return out


def solve_broadcast_team(spec: BroadcastSpec, grid: TimeGrid):
    """Receivers of a static Gaussian message choosing actions from their own channel outputs.

    Returns ``(strategy, report)``.  The mean controls solve
    ``Lambda ubar = M + K`` with ``M_i = -R_ii^{-1} E_i theta_bar`` and
    ``K_i = -R_ii^{-1} m_i``; the law of receiver ``i`` acts on its own
    conditional mean of the message.
    """
    _require_valid(spec, grid)
    R, E, m = _tab(spec, "R", grid), _tab(spec, "E", grid), _tab(spec, "m", grid)
    Lam, cond = _checked_coupling(R, spec.d_blocks)
    rhs = []
    for i in range(spec.N):
        s = spec.control_slice(i)
        rhs.append(-np.linalg.solve(R[:, s, s], (E[:, s, :] @ spec.mean + m[:, s])[..., None])[..., 0])
    ubar = np.linalg.solve(Lam, np.concatenate(rhs, axis=1)[..., None])[..., 0]
    gains = [-np.linalg.solve(R[:, s, s], E[:, s, :]) for s in map(spec.control_slice, range(spec.N))]
    offsets = _cross_offsets(spec, R, ubar, [m[:, spec.control_slice(i)] for i in range(spec.N)])
    strategy = DecentralizedStrategy(gains, offsets, ubar, filter_kind="static_channel")
    covs = [static_channel_covariance(spec, i, grid) if not callable(spec.C[i]) else None for i in range(spec.N)]
    residual = float(np.max(np.abs(np.einsum("kab,kb->ka", Lam, ubar) - np.concatenate(rhs, axis=1))))
    report = SolverReport(
        scenario="broadcast", mean_control=ubar, filter_covariances=[c for c in covs if c is not None],
        terminal_residuals={"mean_control_system": residual}, condition_numbers=cond,
        closure="static_channel: exact conditional mean of the message", tolerance=1e-9,
        mean_state=np.broadcast_to(spec.mean, (len(grid), spec.n)).copy(),
    )
    return strategy, report


def _laws_from_value(spec, grid, Ks, rs, ubar):
    B, R, E, m = (_tab(spec, x, grid) for x in ("B", "R", "E", "m"))
    gains, base = [], []
    for i in range(spec.N):
        s = spec.control_slice(i)
        Bi = B[:, :, s]
        gains.append(-np.linalg.solve(R[:, s, s], np.swapaxes(Bi, 1, 2) @ Ks[i] + E[:, s, :]))
        base.append(np.einsum("knd,kn->kd", Bi, rs[i]) + m[:, s])
    return gains, _cross_offsets(spec, R, ubar, base)


def solve_lq_team_n(spec: LqTeamSpec, grid: TimeGrid, tol: float = 1e-8, max_iter: int = 200, damping: float = 1.0):
    """LQ team with any number of decision makers.

    Each DM's law is ``u^i = Gamma_i xhat^i + gamma_i`` with ``Gamma_i`` from
    its own Riccati solution and ``gamma_i`` from the offsets and mean
    controls of the fixed point.  Returns ``(strategy, report)``.
    """
    _require_valid(spec, grid)
    sols = solve_dm_riccatis(spec, grid)
    Ks = [s.K for s in sols]
    fp = mean_field_fixed_point(spec, Ks, grid, tol=tol, max_iter=max_iter, damping=damping)
    gains, offsets = _laws_from_value(spec, grid, Ks, fp.offsets, fp.mean_control)
    strategy = DecentralizedStrategy(gains, offsets, fp.mean_control, filter_kind="team_coupled")
    bank = build_filter_bank(spec, grid, fp.mean_control)
    report = SolverReport(
        scenario="lq_team", riccati=Ks, offsets=fp.offsets, mean_state=fp.mean_state,
        mean_control=fp.mean_control, filter_covariances=[f.P for f in bank], iterations=fp.iterations,
        residuals=fp.residuals, condition_numbers=fp.condition_numbers, closure=MOMENT_CLOSURE, tolerance=tol,
        terminal_residuals={
            "fixed_point": fp.residual,
            "riccati_asymmetry": max(s.asymmetry for s in sols),
            "riccati_min_eig": min(s.min_eig for s in sols),
        },
    )
    return strategy, report


def solve_lq_team(spec: LqTeamSpec, grid: TimeGrid, tol: float = 1e-8, max_iter: int = 200, damping: float = 1.0):
    """Two-subsystem LQ team (also accepts a single DM)."""
    if spec.N > 2:
        raise SpecError("solve_lq_team handles one or two decision makers; use solve_lq_team_n")
    return solve_lq_team_n(spec, grid, tol=tol, max_iter=max_iter, damping=damping)


def solve_filtering_team(spec: LqTeamSpec, grid: TimeGrid):
    """Team of estimators over uncontrolled dynamics (``B = 0``).

    The mean controls solve ``R ubar + E xbar + m = 0`` with
    ``xbar' = A xbar``; DM ``i`` plays
    ``u^i = -R_ii^{-1}(E_i xhat^i + m_i + sum_{j!=i} R_ij ubar_j)``.
    """
    _require_valid(spec, grid)
    if np.any(spec.B != 0):
        raise SpecError("solve_filtering_team needs B = 0")
    A, R, E, m = (_tab(spec, x, grid) for x in ("A", "R", "E", "m"))
    Lam, cond = _checked_coupling(R, spec.d_blocks)
    As = Schedule(A, grid)
    xbar = rk4_forward(lambda t, x: As(t) @ x, spec.mean, grid, what="mean state")
    ubar = -np.linalg.solve(R, (np.einsum("kdn,kn->kd", E, xbar) + m)[..., None])[..., 0]
    gains = [-np.linalg.solve(R[:, s, s], E[:, s, :]) for s in map(spec.control_slice, range(spec.N))]
    offsets = _cross_offsets(spec, R, ubar, [m[:, spec.control_slice(i)] for i in range(spec.N)])
    strategy = DecentralizedStrategy(gains, offsets, ubar, filter_kind="team_coupled")
    bank = build_filter_bank(spec, grid, ubar)
    defect = np.einsum("kab,kb->ka", R, ubar) + np.einsum("kdn,kn->kd", E, xbar) + m
    report = SolverReport(
        scenario="filtering_team", mean_state=xbar, mean_control=ubar, filter_covariances=[f.P for f in bank],
        condition_numbers=cond, closure="exact: no control enters the dynamics", tolerance=1e-8,
        terminal_residuals={"mean_control_system": float(np.max(np.abs(defect)))},
    )
    return strategy, report


def oracle_lqg(spec: LqTeamSpec, grid: TimeGrid):
    """Centralized LQG reference: one controller sees every channel and sets every input.

    Built only from the control Riccati equation, a plain offset ODE and the
    Kalman filter covariance.  Returns ``(strategy, report)`` with a single
    law acting on the centralized estimate.
    """
    _require_valid(spec, grid)
    A, B, R, E, m, F = (_tab(spec, x, grid) for x in ("A", "B", "R", "E", "m", "F"))
    sol = solve_riccati(spec.schedule("A", grid), spec.schedule("B", grid), spec.schedule("R", grid),
                        spec.schedule("H", grid), spec.M_T, grid, E=spec.schedule("E", grid))
    K = sol.K
    S = K @ B + np.swapaxes(E, 1, 2)
    gain = -np.linalg.solve(R, np.swapaxes(S, 1, 2))
    AclT = Schedule(np.swapaxes(A + B @ gain, 1, 2), grid)
    forcing = Schedule(-F + np.einsum("knd,kd->kn", S, np.linalg.solve(R, m[..., None])[..., 0]), grid)
    r = rk4_backward(lambda t, y: -AclT(t) @ y + forcing(t), np.zeros(spec.n), grid, what="offset")
    offset = -np.linalg.solve(R, (np.einsum("knd,kn->kd", B, r) + m)[..., None])[..., 0]
    P = kalman_riccati(spec.schedule("A", grid), spec.schedule("G", grid), spec.schedule("C", grid),
                       spec.schedule("D", grid), spec.cov, grid)
    Bs, offs = Schedule(B, grid), Schedule(offset, grid)
    gs = Schedule(gain, grid)
    As = Schedule(A, grid)
    xbar = rk4_forward(lambda t, x: (As(t) + Bs(t) @ gs(t)) @ x + Bs(t) @ offs(t), spec.mean, grid)
    ubar = np.einsum("kdn,kn->kd", gain, xbar) + offset
    strategy = DecentralizedStrategy([gain], [offset], ubar, filter_kind="centralized_kalman")
    report = SolverReport(
        scenario="centralized_lqg", riccati=[K], offsets=[r], mean_state=xbar, mean_control=ubar,
        filter_covariances=[P], closure="exact: single decision maker", tolerance=0.0,
        terminal_residuals={"riccati_asymmetry": sol.asymmetry, "riccati_min_eig": sol.min_eig},
    )
    return strategy, report


def centralized_spec(spec: LqTeamSpec) -> LqTeamSpec:
    """Merge every decision maker into one (all inputs, all channels)."""
    return spec.replace(d_blocks=(spec.d,), k_blocks=(spec.k,))
