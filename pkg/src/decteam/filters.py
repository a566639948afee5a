"""Per-decision-maker conditional-mean estimators.

Every filter here is linear in its own state, so it is described by a
:class:`LinearFilterModel` holding per-node tables

    z_{k+1} = z_k + (F z_k + f + b u^i) dt + L (dy^i - Hobs z_k dt),
    xhat^i  = readout @ z.

The simulator consumes these tables directly; the ``*_filter`` functions
below run the same recursions on a recorded observation path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalDegeneracy, SpecError
from .integrators import rk4_forward, sqrt_psd
from .model import BroadcastSpec, DecentralizedStrategy, LqTeamSpec, Schedule, TimeGrid

PSD_TOL = 1e-9

MOMENT_CLOSURE = (
    "team_coupled: conditional covariance replaced by the deterministic Kalman Riccati "
    "solution; other decision makers' actions replaced by their means"
)


@dataclass(frozen=True)
class LinearFilterModel:
    F: np.ndarray
    f: np.ndarray
    b: np.ndarray
    L: np.ndarray
    Hobs: np.ndarray
    readout: np.ndarray
    z0: np.ndarray
    P: np.ndarray
    kind: str = "team_coupled"

    @property
    def dim(self) -> int:
        return self.z0.shape[0]


@dataclass(frozen=True)
class FilterOutput:
    """Estimate, error covariance and innovation increments on the grid.

    Arrays may carry a leading path axis.  ``innovations[..., k, :]`` is the
    increment over ``[t_k, t_{k+1}]``; the last row is zero.
    """

    xhat: np.ndarray
    P: np.ndarray
    innovations: np.ndarray


def _check_psd(P, what="covariance"):
    for k, M in enumerate(P):
        lo = np.linalg.eigvalsh(M)[0]
        if lo < -PSD_TOL * (1.0 + np.max(np.abs(M))):
            raise NumericalDegeneracy(k, lo)


def kalman_riccati(A, G, C, D, P0, grid: TimeGrid) -> np.ndarray:
    """Error covariance ``P' = AP + PA' - P C' D^{-1} C P + GG'`` from ``P(0) = P0``."""
    A = A if isinstance(A, Schedule) else Schedule.of(A, grid, 2)
    G = G if isinstance(G, Schedule) else Schedule.of(G, grid, 2)
    C = C if isinstance(C, Schedule) else Schedule.of(C, grid, 2)
    D = D if isinstance(D, Schedule) else Schedule.of(D, grid, 2)

    def field(t, P):
        a, g, c = A(t), G(t), C(t)
        PCt = P @ c.T
        return a @ P + P @ a.T - PCt @ np.linalg.solve(D(t), PCt.T) + g @ g.T

    P = rk4_forward(field, np.asarray(P0, dtype=float), grid, symmetric=True, what="filter covariance")
    _check_psd(P)
    return P


def _increments(y):
    y = np.asarray(y, dtype=float)
    return np.diff(y, axis=-2)


def _block(spec, name, grid, rows=None, cols=None):
    tab = np.asarray(spec.schedule(name, grid).table())
    if rows is not None:
        tab = tab[:, rows, :]
    if cols is not None:
        tab = tab[:, :, cols]
    return tab


def run_filter(model: LinearFilterModel, y, grid: TimeGrid, control=None) -> FilterOutput:
    """Run a linear filter on an observation path (cumulative ``y`` with ``y[0] = 0``).

    ``control(k, xhat)`` returns DM ``i``'s own action at node ``k``; it is
    needed when the filter drift contains the DM's own input.
    """
    dy = _increments(y)
    batch = dy.shape[:-2]
    K, dt = grid.num_steps, grid.dt
    z = np.broadcast_to(model.z0, batch + model.z0.shape).astype(float)
    zs = np.empty(batch + (K + 1, model.dim))
    innov = np.zeros(batch + (K + 1, dy.shape[-1]))
    zs[..., 0, :] = z
    for k in range(K):
        drift = z @ model.F[k].T + model.f[k]
        if control is not None:
            drift = drift + control(k, z @ model.readout.T) @ model.b[k].T
        dI = dy[..., k, :] - (z @ model.Hobs[k].T) * dt
        z = z + drift * dt + dI @ model.L[k].T
        zs[..., k + 1, :] = z
        innov[..., k, :] = dI
    return FilterOutput(xhat=zs @ model.readout.T, P=model.P, innovations=innov)


# --- static broadcast channel -----------------------------------------------


def _broadcast_gain_table(spec: BroadcastSpec, i: int, grid: TimeGrid, P):
    C = np.asarray(spec.channel(i, grid).table())
    sl = spec.obs_slice(i)
    Dinv = np.linalg.inv(np.asarray(spec.schedule("D", grid).table())[:, sl, sl])
    return C, P @ np.swapaxes(C, 1, 2) @ Dinv


def static_channel_covariance(spec: BroadcastSpec, i: int, grid: TimeGrid) -> np.ndarray:
    """``P' = -P C' D^{-1} C P`` from ``P(0) = P0`` for a fixed channel gain."""
    n = spec.n
    return kalman_riccati(np.zeros((n, n)), np.zeros((n, 1)), spec.channel(i, grid),
                          Schedule.of(np.asarray(spec.schedule("D", grid).table())[:, spec.obs_slice(i), spec.obs_slice(i)], grid, 2),
                          spec.cov, grid)


def static_channel_model(spec: BroadcastSpec, i: int, grid: TimeGrid) -> LinearFilterModel:
    n, K = spec.n, grid.num_steps
    P = static_channel_covariance(spec, i, grid)
    C, L = _broadcast_gain_table(spec, i, grid, P)
    return LinearFilterModel(
        F=np.zeros((K + 1, n, n)), f=np.zeros((K + 1, n)), b=np.zeros((K + 1, n, spec.d_blocks[i])),
        L=L, Hobs=C, readout=np.eye(n), z0=np.array(spec.mean), P=P, kind="static_channel",
    )


def static_filter_step(xhat, P, C, Dinv, dy, dt):
    """One explicit step for an output-dependent channel; batched over paths.

    ``C`` has shape ``(paths, k, n)`` and ``P`` ``(paths, n, n)``.
    """
    PCt = P @ np.swapaxes(C, 1, 2)
    gain = PCt @ Dinv
    dI = dy - np.einsum("pkn,pn->pk", C, xhat) * dt
    xhat = xhat + np.einsum("pnk,pk->pn", gain, dI)
    P = P - dt * gain @ np.swapaxes(PCt, 1, 2)
    return xhat, 0.5 * (P + np.swapaxes(P, 1, 2)), dI


def static_channel_filter(spec: BroadcastSpec, i: int, y, grid: TimeGrid) -> FilterOutput:
    """Conditional mean of the static message given receiver ``i``'s channel output.

    Fixed channels use the RK4 covariance; an output-dependent channel is
    stepped explicitly with the gain evaluated at the left node's output.
    """
    if not callable(spec.C[i]):
        return run_filter(static_channel_model(spec, i, grid), y, grid)
    y = np.asarray(y, dtype=float)
    squeeze = y.ndim == 2
    if squeeze:
        y = y[None]
    Pn, K, dt, n = y.shape[0], grid.num_steps, grid.dt, spec.n
    sl = spec.obs_slice(i)
    Dtab = np.asarray(spec.schedule("D", grid).table())[:, sl, sl]
    xhat = np.broadcast_to(spec.mean, (Pn, n)).copy()
    P = np.broadcast_to(spec.cov, (Pn, n, n)).copy()
    xs, Ps = np.empty((Pn, K + 1, n)), np.empty((Pn, K + 1, n, n))
    innov = np.zeros((Pn, K + 1, y.shape[-1]))
    xs[:, 0], Ps[:, 0] = xhat, P
    dy = np.diff(y, axis=1)
    for k in range(K):
        C = np.asarray(spec.C[i](k * dt, y[:, k]))
        xhat, P, dI = static_filter_step(xhat, P, C, np.linalg.inv(Dtab[k]), dy[:, k], dt)
        xs[:, k + 1], Ps[:, k + 1], innov[:, k] = xhat, P, dI
    if squeeze:
        return FilterOutput(xs[0], Ps[0], innov[0])
    return FilterOutput(xs, Ps, innov)


# --- Kalman-Bucy and team-coupled filters ---------------------------------------


def _dm_covariance(spec: LqTeamSpec, i: int, grid: TimeGrid):
    sl = spec.obs_slice(i)
    C = _block(spec, "C", grid, rows=sl)
    D = _block(spec, "D", grid, rows=sl, cols=sl)
    P = kalman_riccati(spec.schedule("A", grid), spec.schedule("G", grid), Schedule(C, grid), Schedule(D, grid),
                       spec.cov, grid)
    L = P @ np.swapaxes(C, 1, 2) @ np.linalg.inv(D)
    return C, P, L


def team_coupled_model(spec: LqTeamSpec, i: int, grid: TimeGrid, mean_control=None) -> LinearFilterModel:
    """Filter of DM ``i`` with the other DMs' actions replaced by their means."""
    K, n = grid.num_steps, spec.n
    A = _block(spec, "A", grid)
    B = _block(spec, "B", grid)
    C, P, L = _dm_covariance(spec, i, grid)
    own = spec.control_slice(i)
    f = np.zeros((K + 1, n))
    if mean_control is not None:
        others = np.ones(spec.d, dtype=bool)
        others[own] = False
        ubar = np.asarray(mean_control, dtype=float)
        f = np.einsum("knd,kd->kn", B[:, :, others], ubar[:, others])
    return LinearFilterModel(
        F=np.array(A), f=f, b=np.array(B[:, :, own]), L=L, Hobs=C, readout=np.eye(n),
        z0=np.array(spec.mean), P=P, kind="team_coupled",
    )


def build_filter_bank(spec: LqTeamSpec, grid: TimeGrid, mean_control=None) -> list:
    return [team_coupled_model(spec, i, grid, mean_control) for i in range(spec.N)]


def kalman_bucy_filter(spec: LqTeamSpec, i: int, y, grid: TimeGrid, inputs=None) -> FilterOutput:
    """Kalman-Bucy filter of DM ``i`` for uncontrolled dynamics.

    ``inputs`` is an optional known deterministic input schedule ``(K+1, d)``
    entering the drift through ``B``.
    """
    model = team_coupled_model(spec, i, grid)
    if inputs is not None:
        B = _block(spec, "B", grid)
        model = LinearFilterModel(**{**model.__dict__, "f": np.einsum("knd,kd->kn", B, np.asarray(inputs))})
    elif np.any(spec.B != 0):
        raise SpecError("kalman_bucy_filter needs B = 0 or a known input schedule")
    return run_filter(model, y, grid)


def team_coupled_filter(spec: LqTeamSpec, strategy: DecentralizedStrategy, i: int, y, grid: TimeGrid) -> FilterOutput:
    """Closure filter of DM ``i`` driven by its own law and the others' mean actions."""
    model = team_coupled_model(spec, i, grid, strategy.mean_control)

    def control(k, xhat):
        return xhat @ strategy.gains[i][k].T + strategy.offsets[i][k]

    return run_filter(model, y, grid, control)


def exact_filter_model(spec: LqTeamSpec, grid: TimeGrid, strategy: DecentralizedStrategy, bank, i: int) -> LinearFilterModel:
    """Exact Kalman-Bucy filter of DM ``i`` against the other DMs' actual laws.

    The other DMs' filter states are appended to the physical state, giving
    a linear-Gaussian system ``s = (x, z^j, j != i)`` that DM ``i`` observes
    through its own channel.  Its conditional mean is computed without any
    moment closure; the readout returns the estimate of ``x``.
    """
    K, n = grid.num_steps, spec.n
    A = _block(spec, "A", grid)
    B = _block(spec, "B", grid)
    G = _block(spec, "G", grid)
    Ct = _block(spec, "C", grid)
    Dt = _block(spec, "D", grid)
    others = [j for j in range(spec.N) if j != i]
    dims = [n] + [bank[j].dim for j in others]
    off = np.concatenate([[0], np.cumsum(dims)]).astype(int)
    ns = int(off[-1])
    Fa = np.zeros((K + 1, ns, ns))
    fa = np.zeros((K + 1, ns))
    Fa[:, :n, :n] = A
    for idx, j in enumerate(others, start=1):
        zj = slice(off[idx], off[idx + 1])
        mj = bank[j]
        Gz = np.einsum("kdn,nz->kdz", strategy.gains[j], mj.readout)
        Bj = B[:, :, spec.control_slice(j)]
        sl = spec.obs_slice(j)
        Fa[:, :n, zj] = Bj @ Gz
        fa[:, :n] += np.einsum("knd,kd->kn", Bj, strategy.offsets[j])
        Fa[:, zj, zj] = mj.F - mj.L @ mj.Hobs + mj.b @ Gz
        Fa[:, zj, :n] = mj.L @ Ct[:, sl, :]
        fa[:, zj] = mj.f + np.einsum("kzd,kd->kz", mj.b, strategy.offsets[j])
    # noise: [W, B^j for j != i]
    m_cols = [G.shape[2]] + [spec.k_blocks[j] for j in others]
    moff = np.concatenate([[0], np.cumsum(m_cols)]).astype(int)
    Gfull = np.zeros((K + 1, ns, int(moff[-1])))
    Gfull[:, :n, :moff[1]] = G
    for idx, j in enumerate(others, start=1):
        sl = spec.obs_slice(j)
        half = np.stack([sqrt_psd(Dt[k][sl, sl]) for k in range(K + 1)])
        Gfull[:, off[idx]:off[idx + 1], moff[idx]:moff[idx + 1]] = bank[j].L @ half
    sl = spec.obs_slice(i)
    Ca = np.zeros((K + 1, spec.k_blocks[i], ns))
    Ca[:, :, :n] = Ct[:, sl, :]
    Di = Dt[:, sl, sl]
    P0 = np.zeros((ns, ns))
    P0[:n, :n] = spec.cov
    P = kalman_riccati(Schedule(Fa, grid), Schedule(Gfull, grid), Schedule(Ca, grid), Schedule(Di, grid), P0, grid)
    L = P @ np.swapaxes(Ca, 1, 2) @ np.linalg.inv(Di)
    ba = np.zeros((K + 1, ns, spec.d_blocks[i]))
    ba[:, :n] = B[:, :, spec.control_slice(i)]
    z0 = np.concatenate([spec.mean] + [bank[j].z0 for j in others])
    readout = np.zeros((n, ns))
    readout[:, :n] = np.eye(n)
    return LinearFilterModel(F=Fa, f=fa, b=ba, L=L, Hobs=Ca, readout=readout, z0=z0, P=P, kind="exact_augmented")


def lower_triangle(P: np.ndarray) -> np.ndarray:
    """Vectorized lower triangles of a covariance stack, row by row."""
    r, c = np.tril_indices(P.shape[-1])
    return P[..., r, c]
