"""Backward matrix equations and the mean-field fixed point.

Per decision maker ``i`` the value-function pieces solve

    K' + A'K + KA + H - (K B_i + E_i') R_ii^{-1} (B_i' K + E_i) = 0,  K(T) = M_T
    r' = -(A - B_i R_ii^{-1}(B_i'K + E_i))' r - F
         + (K B_i + E_i') R_ii^{-1} (m_i + sum_{j!=i} R_ij ubar_j)
         - sum_{j!=i} (K B_j + E_j') ubar_j,                          r(T) = 0

and the mean state and mean controls satisfy ``xbar' = A xbar + B ubar`` with
``Lambda ubar = rhs`` at every node, ``Lambda = diag(R_ii^{-1}) R``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FixedPointSingular, NonConvergence
from .integrators import TransitionFamily, rk4_backward, rk4_forward
from .model import LqTeamSpec, Schedule, TimeGrid

COND_LIMIT = 1e12


@dataclass(frozen=True)
class RiccatiSolution:
    K: np.ndarray
    terminal: np.ndarray
    asymmetry: float
    min_eig: float
    q11: np.ndarray | None = None

    def __getitem__(self, k):
        return self.K[k]


def _sched(X, grid, base=2):
    return X if isinstance(X, Schedule) else Schedule.of(X, grid, base)


def _summarize(K, terminal, q11=None):
    asym = float(np.max(np.abs(K - np.swapaxes(K, 1, 2))))
    lo = float(min(np.linalg.eigvalsh(M)[0] for M in K)) if K.shape[-1] else 0.0
    return RiccatiSolution(K=K, terminal=np.array(terminal, dtype=float), asymmetry=asym, min_eig=lo, q11=q11)


def solve_riccati(A, B, R, H, M_T, grid: TimeGrid, E=None) -> RiccatiSolution:
    """Control Riccati equation for one decision maker's input block.

    ``E`` is the optional state-action cross weight of that block.  The
    terminal node is assigned ``M_T`` exactly.
    """
    A, B, R, H = (_sched(X, grid) for X in (A, B, R, H))
    E = None if E is None else _sched(E, grid)

    def rhs(t, K):
        a, b, r = A(t), B(t), R(t)
        S = K @ b if E is None else K @ b + E(t).T
        return -(a.T @ K + K @ a + H(t) - S @ np.linalg.solve(r, S.T))

    K = rk4_backward(rhs, M_T, grid, symmetric=True, what="Riccati solution")
    K[-1] = M_T
    return _summarize(K, M_T)


def solve_sigma_lyapunov(A, H, M_T, grid: TimeGrid, G=None) -> RiccatiSolution:
    """``Sigma' + A'Sigma + Sigma A + H = 0`` with ``Sigma(T) = M_T``.

    When the noise gain ``G`` is given, ``q11 = Sigma G`` is attached.
    """
    A, H = _sched(A, grid), _sched(H, grid)

    def rhs(t, S):
        a = A(t)
        return -(a.T @ S + S @ a + H(t))

    S = rk4_backward(rhs, M_T, grid, symmetric=True, what="Lyapunov solution")
    S[-1] = M_T
    q11 = None
    if G is not None:
        q11 = S @ np.asarray(_sched(G, grid).table())
    return _summarize(S, M_T, q11)


def closed_loop_generator(spec: LqTeamSpec, K, i: int, grid: TimeGrid) -> Schedule:
    """``A - B_i R_ii^{-1} (B_i' K^i + E_i)`` on the grid."""
    A = np.asarray(spec.schedule("A", grid).table())
    own = spec.control_slice(i)
    B = np.asarray(spec.schedule("B", grid).table())[:, :, own]
    R = np.asarray(spec.schedule("R", grid).table())[:, own, own]
    E = np.asarray(spec.schedule("E", grid).table())[:, own, :]
    S = np.swapaxes(B, 1, 2) @ K + E
    return Schedule(A - B @ np.linalg.solve(R, S), grid)


def closed_loop_family(spec: LqTeamSpec, K, i: int, grid: TimeGrid) -> TransitionFamily:
    return TransitionFamily(closed_loop_generator(spec, K, i, grid), grid)


def solve_dm_riccatis(spec: LqTeamSpec, grid: TimeGrid) -> list:
    out = []
    for i in range(spec.N):
        own = spec.control_slice(i)
        B = np.asarray(spec.schedule("B", grid).table())[:, :, own]
        R = np.asarray(spec.schedule("R", grid).table())[:, own, own]
        E = np.asarray(spec.schedule("E", grid).table())[:, own, :]
        out.append(solve_riccati(spec.schedule("A", grid), Schedule(B, grid), Schedule(R, grid),
                                 spec.schedule("H", grid), spec.M_T, grid, E=Schedule(E, grid)))
    return out


class _Tables:
    """Grid tables of the coefficients the offset and mean equations need."""

    def __init__(self, spec: LqTeamSpec, grid: TimeGrid, Ks):
        tab = lambda name: np.asarray(spec.schedule(name, grid).table())  # noqa: E731
        self.grid = grid
        self.N = spec.N
        self.sl = [spec.control_slice(i) for i in range(spec.N)]
        self.A, self.B, self.R = tab("A"), tab("B"), tab("R")
        self.E, self.m, self.F = tab("E"), tab("m"), tab("F")
        self.Ks = [np.asarray(K) for K in Ks]
        # S_j^i = K^i B_j + E_j' for every pair, per node
        self.S = [[self.Ks[i] @ self.B[:, :, self.sl[j]] + np.swapaxes(self.E[:, self.sl[j], :], 1, 2)
                   for j in range(self.N)] for i in range(self.N)]
        self.Rii_inv = [np.linalg.inv(self.R[:, s, s]) for s in self.sl]
        self.Lam = np.concatenate(
            [np.einsum("kab,kbc->kac", self.Rii_inv[i], self.R[:, s, :]) for i, s in enumerate(self.sl)], axis=1)
        self.cond = np.linalg.cond(self.Lam)

    def check(self):
        bad = np.flatnonzero(~(self.cond <= COND_LIMIT))
        if bad.size:
            k = int(bad[0])
            raise FixedPointSingular(k, self.cond[k])


def solve_offset_odes(spec: LqTeamSpec, Ks, ubar, grid: TimeGrid) -> list:
    """Offsets ``r^i`` integrated backward from zero for a given mean-control schedule."""
    tabs = _Tables(spec, grid, [K.K if isinstance(K, RiccatiSolution) else K for K in Ks])
    return _offsets(tabs, np.asarray(ubar, dtype=float))


def _offsets(tabs: _Tables, ubar):
    grid, N, n = tabs.grid, tabs.N, tabs.A.shape[1]
    out = []
    for i in range(N):
        si = tabs.sl[i]
        # closed-loop generator and forcing tabulated on the grid, then interpolated
        Bi = tabs.B[:, :, si]
        Rinv = tabs.Rii_inv[i]
        Acl = tabs.A - Bi @ Rinv @ np.swapaxes(tabs.S[i][i], 1, 2)
        cross = tabs.m[:, si].copy()
        forcing = -tabs.F.copy()
        for j in range(N):
            if j == i:
                continue
            sj = tabs.sl[j]
            cross += np.einsum("kab,kb->ka", tabs.R[:, si, sj], ubar[:, sj])
            forcing -= np.einsum("knd,kd->kn", tabs.S[i][j], ubar[:, sj])
        forcing += np.einsum("knd,kd->kn", tabs.S[i][i] @ Rinv, cross)
        AclT = Schedule(np.swapaxes(Acl, 1, 2), grid)
        g = Schedule(forcing, grid)
        if not np.any(forcing):
            out.append(np.zeros((len(grid), n)))
            continue
        out.append(rk4_backward(lambda t, r: -AclT(t) @ r + g(t), np.zeros(n), grid, what=f"offset r^{i + 1}"))
    return out


def _node_rhs(tabs: _Tables, xbar, rs):
    """Right side of ``Lambda ubar = rhs`` at every node (vectorized)."""
    parts = []
    for i, s in enumerate(tabs.sl):
        Bi = tabs.B[:, :, s]
        v = (np.einsum("kdn,kn->kd", np.swapaxes(tabs.S[i][i], 1, 2), xbar)
             + np.einsum("knd,kn->kd", Bi, rs[i]) + tabs.m[:, s])
        parts.append(-np.einsum("kab,kb->ka", tabs.Rii_inv[i], v))
    return np.concatenate(parts, axis=1)


@dataclass
class FixedPointState:
    iterations: int
    mean_control: np.ndarray
    offsets: list
    mean_state: np.ndarray
    residual: float
    residuals: list = field(default_factory=list)
    condition_numbers: np.ndarray | None = None


def _mean_state(spec, tabs, rs, grid):
    """Integrate ``xbar`` forward with the node solve closing the loop."""
    Lam = Schedule(tabs.Lam, grid)
    coef = []
    const = []
    for i, s in enumerate(tabs.sl):
        coef.append(-tabs.Rii_inv[i] @ np.swapaxes(tabs.S[i][i], 1, 2))
        const.append(-np.einsum("kab,kb->ka", tabs.Rii_inv[i],
                                np.einsum("knd,kn->kd", tabs.B[:, :, s], rs[i]) + tabs.m[:, s]))
    coef = Schedule(np.concatenate(coef, axis=1), grid)
    const = Schedule(np.concatenate(const, axis=1), grid)
    A, B = Schedule(tabs.A, grid), Schedule(tabs.B, grid)

    def rhs(t, x):
        u = np.linalg.solve(Lam(t), coef(t) @ x + const(t))
        return A(t) @ x + B(t) @ u

    return rk4_forward(rhs, spec.mean, grid, what="mean state")


def mean_field_fixed_point(spec: LqTeamSpec, Ks, grid: TimeGrid, tol: float = 1e-8, max_iter: int = 200,
                           damping: float = 1.0, initial=None) -> FixedPointState:
    """Damped Picard iteration on the mean controls.

    One sweep solves the offsets backward for the current ``ubar``,
    integrates the mean state forward and re-solves the node equations.
    The step ``ubar <- (1 - alpha) ubar + alpha ubar_new`` starts at
    ``alpha = damping`` and is halved whenever the residual grows.
    """
    tabs = _Tables(spec, grid, [K.K if isinstance(K, RiccatiSolution) else K for K in Ks])
    tabs.check()
    ubar = np.zeros((len(grid), spec.d)) if initial is None else np.array(initial, dtype=float)
    alpha = float(damping)
    history = []
    prev = np.inf
    for it in range(1, max_iter + 1):
        rs = _offsets(tabs, ubar)
        xbar = _mean_state(spec, tabs, rs, grid)
        target = _node_rhs(tabs, xbar, rs)
        defect = np.einsum("kab,kb->ka", tabs.Lam, ubar) - target
        res = float(np.max(np.linalg.norm(defect, axis=1)) / (1.0 + np.max(np.abs(ubar), initial=0.0)))
        history.append(res)
        if res <= tol:
            return FixedPointState(it, ubar, rs, xbar, res, history, tabs.cond)
        if res > prev:
            alpha *= 0.5
        prev = res
        ubar = (1 - alpha) * ubar + alpha * np.linalg.solve(tabs.Lam, target[..., None])[..., 0]
    raise NonConvergence(history)
