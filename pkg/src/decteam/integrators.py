"""ODE integration, transition matrices and Euler-Maruyama path simulation."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import IntegrationBlowup, SpecError
from .model import DecentralizedStrategy, LqTeamSpec, Schedule, TimeGrid, Trajectory

DEFAULT_CHUNK = 1000


def _sym(y):
    return 0.5 * (y + np.swapaxes(y, -1, -2))


def rk4_backward(field, terminal, grid: TimeGrid, symmetric: bool = False, what: str = "solution"):
    """Integrate ``y' = field(t, y)`` from ``y(T) = terminal`` down to ``t = 0``.

    Returns an array of shape ``(K+1,) + terminal.shape`` indexed by node.
    With ``symmetric=True`` each step is symmetrized, which suits matrix
    Riccati and Lyapunov flows.
    """
    y = np.array(terminal, dtype=float)
    K, h = grid.num_steps, grid.dt
    out = np.empty((K + 1,) + y.shape)
    out[K] = y
    for k in range(K - 1, -1, -1):
        t = (k + 1) * h
        k1 = field(t, y)
        k2 = field(t - 0.5 * h, y - 0.5 * h * k1)
        k3 = field(t - 0.5 * h, y - 0.5 * h * k2)
        k4 = field(t - h, y - h * k3)
        y = y - (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if symmetric:
            y = _sym(y)
        if not np.all(np.isfinite(y)):
            raise IntegrationBlowup(k, what)
        out[k] = y
    return out


def rk4_forward(field, initial, grid: TimeGrid, symmetric: bool = False, what: str = "solution"):
    """Integrate ``y' = field(t, y)`` from ``y(0) = initial`` up to ``T``."""
    y = np.array(initial, dtype=float)
    K, h = grid.num_steps, grid.dt
    out = np.empty((K + 1,) + y.shape)
    out[0] = y
    for k in range(K):
        t = k * h
        k1 = field(t, y)
        k2 = field(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = field(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = field(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if symmetric:
            y = _sym(y)
        if not np.all(np.isfinite(y)):
            raise IntegrationBlowup(k + 1, what)
        out[k + 1] = y
    return out


def _as_schedule(A, grid):
    return A if isinstance(A, Schedule) else Schedule.of(A, grid, 2)


class TransitionFamily:
    """Transition matrices ``Phi(t_k, t_j)`` of ``x' = A(t) x`` on a grid.

    One RK4 step of the matrix flow is stored per grid interval; longer
    spans are products of those steps, so the cocycle identity holds up to
    floating-point rounding.
    """

    def __init__(self, A, grid: TimeGrid):
        self.grid = grid
        A = _as_schedule(A, grid)
        n = A.at(0).shape[0]
        h = grid.dt
        steps = np.empty((grid.num_steps, n, n))
        eye = np.eye(n)
        for k in range(grid.num_steps):
            t = k * h
            a0, am, a1 = A(t), A(t + 0.5 * h), A(t + h)
            k1 = a0
            k2 = am @ (eye + 0.5 * h * k1)
            k3 = am @ (eye + 0.5 * h * k2)
            k4 = a1 @ (eye + h * k3)
            steps[k] = eye + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(steps[k])):
                raise IntegrationBlowup(k + 1, "transition matrix")
        self.steps = steps
        self.n = n

    def __call__(self, to_node: int, from_node: int) -> np.ndarray:
        if from_node > to_node:
            raise SpecError("transition family needs from_node <= to_node")
        out = np.eye(self.n)
        for k in range(from_node, to_node):
            out = self.steps[k] @ out
        return out

    def adjoint(self, to_node: int, from_node: int) -> np.ndarray:
        return self(to_node, from_node).T

    def from_start(self) -> np.ndarray:
        """Stack of ``Phi(t_k, 0)`` for every node."""
        out = np.empty((self.grid.num_steps + 1, self.n, self.n))
        out[0] = np.eye(self.n)
        for k in range(self.grid.num_steps):
            out[k + 1] = self.steps[k] @ out[k]
        return out


def transition_matrix(A, grid: TimeGrid, from_node: int, to_node: int) -> np.ndarray:
    """``Phi(t_to, t_from)`` of ``x' = A(t) x``."""
    if from_node > to_node:
        raise SpecError("transition_matrix needs from_node <= to_node")
    A = _as_schedule(A, grid)
    n = A.at(0).shape[0]
    h = grid.dt
    Phi = np.eye(n)
    for k in range(from_node, to_node):
        t = k * h
        a0, am, a1 = A(t), A(t + 0.5 * h), A(t + h)
        k1 = a0 @ Phi
        k2 = am @ (Phi + 0.5 * h * k1)
        k3 = am @ (Phi + 0.5 * h * k2)
        k4 = a1 @ (Phi + h * k3)
        Phi = Phi + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(Phi)):
            raise IntegrationBlowup(k + 1, "transition matrix")
    return Phi


# --- random numbers -------------------------------------------------------


def path_normals(seed: int, path_index: int, count: int) -> np.ndarray:
    """Standard normals for one path from a Philox stream keyed by ``(seed, path)``.

    Nodes and channels map to fixed offsets inside the path's stream, so a
    path's draws never depend on how many paths are simulated or in which
    order.
    """
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, int(path_index) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).standard_normal(count)


def noise_block(seed: int, paths, per_path: int) -> np.ndarray:
    return np.stack([path_normals(seed, p, per_path) for p in paths])


def sqrt_psd(M: np.ndarray) -> np.ndarray:
    """Symmetric square root of a symmetric PSD matrix."""
    w, V = np.linalg.eigh(_sym(np.asarray(M, dtype=float)))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


# --- Euler-Maruyama ensembles --------------------------------------------


@dataclass
class Ensemble:
    """Per-path results of one simulated strategy.

    ``costs`` always holds the per-path pay-off.  Record arrays are
    populated only when requested and carry a leading path axis.
    """

    costs: np.ndarray
    x_final: np.ndarray
    xhat_final: list
    innovation_total: list
    x: np.ndarray | None = None
    y: list | None = None
    xhat: list | None = None
    u: list | None = None
    dW: np.ndarray | None = None
    dB: list | None = None
    innovations: list | None = None

    @property
    def mean_cost(self) -> float:
        return float(np.mean(self.costs))

    @property
    def cost_se(self) -> float:
        P = self.costs.shape[0]
        return float(np.std(self.costs, ddof=1) / np.sqrt(P)) if P > 1 else float("nan")


class _Plan:
    """Per-step tables of one strategy closed with its filter bank."""

    def __init__(self, spec, grid, strategy, filters):
        K = grid.num_steps
        dt = grid.dt
        self.N = spec.N
        self.open_loop = strategy is None
        self.z_trans, self.z_const, self.z_obs, self.gain_z, self.offset = [], [], [], [], []
        self.readout, self.z0, self.obs = [], [], []
        if strategy is None:
            return
        if filters is None or len(filters) != spec.N:
            raise SpecError("a strategy needs one filter per decision maker")
        if strategy.N != spec.N:
            raise SpecError("strategy and spec disagree on the number of decision makers")
        for i, f in enumerate(filters):
            nz = f.z0.shape[0]
            Gz = np.einsum("kdn,nz->kdz", strategy.gains[i], f.readout)
            if Gz.shape[1] != spec.d_blocks[i]:
                raise SpecError(f"gain of DM {i + 1} has wrong row count")
            # z_{k+1} = (I + (F - L Hobs + b Gz) dt) z + (f + b gamma) dt + L dy
            Mk = np.eye(nz)[None] + dt * (f.F - f.L @ f.Hobs + f.b @ Gz)
            ck = dt * (f.f + np.einsum("kzd,kd->kz", f.b, strategy.offsets[i]))
            self.z_trans.append(np.ascontiguousarray(np.swapaxes(Mk[:K], 1, 2)))
            self.z_const.append(ck[:K])
            self.z_obs.append(np.ascontiguousarray(np.swapaxes(f.L[:K], 1, 2)))
            self.gain_z.append(np.ascontiguousarray(np.swapaxes(Gz, 1, 2)))
            self.offset.append(np.asarray(strategy.offsets[i]))
            self.readout.append(f.readout.T.copy())
            self.z0.append(np.asarray(f.z0, dtype=float))
            self.obs.append(np.ascontiguousarray(np.swapaxes(f.Hobs, 1, 2)))


class _Coefficients:
    def __init__(self, spec: LqTeamSpec, grid: TimeGrid):
        K = grid.num_steps
        dt = grid.dt

        def tab(name):
            return np.asarray(spec.schedule(name, grid).table())

        A, B, G, C, D = tab("A"), tab("B"), tab("G"), tab("C"), tab("D")
        self.x_trans = np.ascontiguousarray(np.swapaxes(np.eye(spec.n)[None] + dt * A, 1, 2))
        self.Bt = np.ascontiguousarray(np.swapaxes(B, 1, 2)) * dt
        self.Gt = np.ascontiguousarray(np.swapaxes(G, 1, 2))
        self.Ct = [np.ascontiguousarray(np.swapaxes(C[:, spec.obs_slice(i), :], 1, 2)) * dt for i in range(spec.N)]
        self.Dh = []
        for i in range(spec.N):
            sl = spec.obs_slice(i)
            self.Dh.append(np.stack([sqrt_psd(D[k][sl, sl]).T for k in range(K + 1)]))
        self.R_half = 0.5 * tab("R")
        self.H_half = 0.5 * tab("H")
        self.E = tab("E")
        self.m = tab("m")
        self.F = tab("F")
        self.M_T = spec.M_T
        self.mean = spec.mean
        self.cov_half = sqrt_psd(spec.cov)


def _layout(spec):
    return spec.n, spec.noise_dim + spec.k


def simulate_ensemble(spec: LqTeamSpec, grid: TimeGrid, strategies, filters=None, *, seed: int = 0,
                      num_paths: int = 1, first_path: int = 0, record: bool = False,
                      noiseless: bool = False, chunk: int = DEFAULT_CHUNK, threads: int = 1):
    """Simulate one or more strategies on shared noise (common random numbers).

    ``strategies`` is a single strategy, ``None`` (zero control) or a list of
    them; ``filters`` is a matching filter bank or list of banks.  Paths are
    processed in fixed-size chunks that are reduced in path order, so the
    result does not depend on ``threads``.
    """
    single = not isinstance(strategies, (list, tuple))
    strat_list = [strategies] if single else list(strategies)
    bank_list = [filters] if single else list(filters) if filters is not None else [None] * len(strat_list)
    if len(bank_list) != len(strat_list):
        raise SpecError("one filter bank per strategy required")
    coeffs = _Coefficients(spec, grid)
    plans = [_Plan(spec, grid, s, f) for s, f in zip(strat_list, bank_list)]
    n0, width = _layout(spec)
    per_path = n0 + grid.num_steps * width
    starts = list(range(first_path, first_path + num_paths, chunk))

    def run_chunk(start):
        paths = range(start, min(start + chunk, first_path + num_paths))
        if noiseless:
            xi = np.zeros((len(paths), per_path))
        else:
            xi = noise_block(seed, paths, per_path)
        return _run_all(spec, grid, coeffs, plans, xi, record)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run_chunk, starts))
    else:
        parts = [run_chunk(s) for s in starts]
    results = [_merge([p[j] for p in parts]) for j in range(len(plans))]
    return results[0] if single else results


def _signature(plan: _Plan):
    return (plan.open_loop,) + tuple(z0.shape[0] for z0 in plan.z0) + tuple(r.shape for r in plan.readout)


def _groups(plans):
    """Indices of plans sharing table shapes, so they can be stacked."""
    groups = {}
    for idx, plan in enumerate(plans):
        groups.setdefault(_signature(plan), []).append(idx)
    return list(groups.values())


def _run_all(spec, grid, c, plans, xi, record):
    out = [None] * len(plans)
    for idx in _groups(plans):
        for j, ens in zip(idx, _run([plans[j] for j in idx], spec, grid, c, xi, record)):
            out[j] = ens
    return out


def _run(plans, spec, grid, c: _Coefficients, xi, record):
    """Advance every plan of one shape group on the same noise.

    Arrays carry a leading strategy axis ``S`` followed by the path axis.
    """
    S, P = len(plans), xi.shape[0]
    K, dt = grid.num_steps, grid.dt
    n, N, mw = spec.n, spec.N, spec.noise_dim
    open_loop = plans[0].open_loop
    sqdt = np.sqrt(dt)
    kb = spec.k_blocks
    noise = xi[:, n:].reshape(P, K, -1)
    dW_all = noise[:, :, :mw] * sqdt
    dB_all, off = [], mw
    for i in range(N):
        dB_all.append(noise[:, :, off:off + kb[i]] * sqdt)
        off += kb[i]
    # strategy-independent noise terms, once per chunk
    w_state = np.einsum("pkm,kmn->kpn", dW_all, c.Gt[:K])
    w_obs = [np.einsum("pka,kab->kpb", dB_all[i], c.Dh[i][:K]) for i in range(N)]
    x0 = c.mean + xi[:, :n] @ c.cov_half.T
    x = np.broadcast_to(x0, (S, P, n)).copy()
    stack = (lambda name, i: np.stack([getattr(pl, name)[i] for pl in plans]))
    if not open_loop:
        z_trans = [stack("z_trans", i) for i in range(N)]
        z_const = [stack("z_const", i)[:, :, None, :] for i in range(N)]
        z_obs = [stack("z_obs", i) for i in range(N)]
        gain_z = [stack("gain_z", i) for i in range(N)]
        offset = [stack("offset", i)[:, :, None, :] for i in range(N)]
        obs = [stack("obs", i) for i in range(N)]
        readout = [stack("readout", i) for i in range(N)]
        z = [np.broadcast_to(stack("z0", i)[:, None, :], (S, P, plans[0].z0[i].shape[0])).copy() for i in range(N)]
    else:
        z = []
    y = [np.zeros((S, P, kb[i])) for i in range(N)]
    innov = [np.zeros((S, P, kb[i])) for i in range(N)]
    cost = np.zeros((S, P))
    d_sl = [spec.control_slice(i) for i in range(N)]
    if record:
        rec_x = np.empty((S, P, K + 1, n))
        rec_y = [np.zeros((S, P, K + 1, kb[i])) for i in range(N)]
        rec_xh = [np.zeros((S, P, K + 1, 0 if open_loop else readout[i].shape[2])) for i in range(N)]
        rec_u = [np.empty((S, P, K + 1, spec.d_blocks[i])) for i in range(N)]
        rec_I = [np.zeros((S, P, K + 1, kb[i])) for i in range(N)]
    u = np.zeros((S, P, spec.d))
    for k in range(K + 1):
        if not open_loop:
            for i in range(N):
                u[:, :, d_sl[i]] = z[i] @ gain_z[i][:, k] + offset[i][:, k]
        if record:
            rec_x[:, :, k] = x
            for i in range(N):
                rec_u[i][:, :, k] = u[:, :, d_sl[i]]
                if not open_loop:
                    rec_xh[i][:, :, k] = z[i] @ readout[i]
        if k == K:
            break
        # l = x.(H x / 2 + E'u + F) + u.(R u / 2 + m)
        cost += dt * (((x @ c.H_half[k] + u @ c.E[k] + c.F[k]) * x).sum(axis=2)
                      + ((u @ c.R_half[k] + c.m[k]) * u).sum(axis=2))
        dys = [x @ c.Ct[i][k] + w_obs[i][k] for i in range(N)]
        x = x @ c.x_trans[k] + u @ c.Bt[k] + w_state[k]
        for i in range(N):
            if not open_loop:
                dI = dys[i] - (z[i] @ obs[i][:, k]) * dt
                innov[i] += dI
                z[i] = z[i] @ z_trans[i][:, k] + z_const[i][:, k] + dys[i] @ z_obs[i][:, k]
                if record:
                    rec_I[i][:, :, k] = dI
            y[i] = y[i] + dys[i]
            if record:
                rec_y[i][:, :, k + 1] = y[i]
        if not np.all(np.isfinite(x)):
            raise IntegrationBlowup(k + 1, "state path")
    cost += 0.5 * ((x @ c.M_T) * x).sum(axis=2)
    xh_final = [] if open_loop else [z[i] @ readout[i] for i in range(N)]
    out = []
    for s in range(S):
        ens = Ensemble(costs=cost[s], x_final=x[s], xhat_final=[a[s] for a in xh_final],
                       innovation_total=[a[s] for a in innov])
        if record:
            ens.x, ens.y, ens.u = rec_x[s], [a[s] for a in rec_y], [a[s] for a in rec_u]
            ens.xhat = [a[s] for a in rec_xh]
            ens.dW = np.concatenate([dW_all, np.zeros((P, 1, mw))], axis=1)
            ens.dB = [np.concatenate([b, np.zeros((P, 1, b.shape[2]))], axis=1) for b in dB_all]
            ens.innovations = [a[s] for a in rec_I]
        out.append(ens)
    return out


def euler_maruyama(spec: LqTeamSpec, grid: TimeGrid, seed: int, strategy: DecentralizedStrategy | None = None,
                   filters=None, path_index: int = 0, noiseless: bool = False) -> Trajectory:
    """One Euler-Maruyama sample path, with controls taken at the left node."""
    if strategy is not None and filters is None:
        raise SpecError("a strategy needs a filter bank to produce its inputs")
    ens = simulate_ensemble(spec, grid, strategy, filters, seed=seed, num_paths=1,
                            first_path=path_index, record=True, noiseless=noiseless)
    return Trajectory(
        t=grid.nodes, x=ens.x[0], y=tuple(a[0] for a in ens.y), xhat=tuple(a[0] for a in ens.xhat),
        u=tuple(a[0] for a in ens.u), dW=ens.dW[0], dB=tuple(b[0] for b in ens.dB),
        seed=int(seed), path_index=int(path_index),
    )


def simulate_broadcast(spec, grid: TimeGrid, strategies, *, seed: int = 0, num_paths: int = 1,
                       first_path: int = 0, record: bool = False, chunk: int = DEFAULT_CHUNK, threads: int = 1):
    """Monte Carlo of the static broadcast problem on shared noise.

    Each path draws the message ``theta`` and every receiver's channel noise;
    receivers filter their own output and act through their law.  Output
    dependent channels are stepped with per-path covariances.
    """
    from .filters import static_channel_model, static_filter_step

    single = not isinstance(strategies, (list, tuple))
    strat_list = [strategies] if single else list(strategies)
    K, dt, n, N = grid.num_steps, grid.dt, spec.n, spec.N
    kb = spec.k_blocks
    models = [None if callable(spec.C[i]) else static_channel_model(spec, i, grid) for i in range(N)]
    R, H, E = (np.asarray(spec.schedule(x, grid).table()) for x in ("R", "H", "E"))
    m, F = (np.asarray(spec.schedule(x, grid).table()) for x in ("m", "F"))
    Dtab = np.asarray(spec.schedule("D", grid).table())
    Dh = [np.stack([sqrt_psd(Dtab[k][spec.obs_slice(i), spec.obs_slice(i)]).T for k in range(K + 1)])
          for i in range(N)]
    Dinv = [np.linalg.inv(Dtab[:, spec.obs_slice(i), spec.obs_slice(i)]) for i in range(N)]
    half = sqrt_psd(spec.cov)
    per_path = n + K * spec.k
    starts = list(range(first_path, first_path + num_paths, chunk))

    def run_chunk(start):
        paths = range(start, min(start + chunk, first_path + num_paths))
        xi = noise_block(seed, paths, per_path)
        P = xi.shape[0]
        theta = spec.mean + xi[:, :n] @ half.T
        dB = xi[:, n:].reshape(P, K, spec.k) * np.sqrt(dt)
        # observation increments are strategy independent: compute once
        ys, dys = [], []
        for i in range(N):
            sl = spec.obs_slice(i)
            y = np.zeros((P, K + 1, kb[i]))
            dy = np.empty((P, K, kb[i]))
            for k in range(K):
                C = spec.C[i](k * dt, y[:, k]) if callable(spec.C[i]) else np.broadcast_to(
                    models[i].Hobs[k], (P,) + models[i].Hobs[k].shape)
                dy[:, k] = np.einsum("pkn,pn->pk", C, theta) * dt + dB[:, k, sl] @ Dh[i][k]
                y[:, k + 1] = y[:, k] + dy[:, k]
            ys.append(y)
            dys.append(dy)
        # estimates are strategy independent as well
        est = []
        for i in range(N):
            xs = np.empty((P, K + 1, n))
            xh = np.broadcast_to(spec.mean, (P, n)).copy()
            Pc = np.broadcast_to(spec.cov, (P, n, n)).copy()
            xs[:, 0] = xh
            for k in range(K):
                if models[i] is None:
                    C = np.asarray(spec.C[i](k * dt, ys[i][:, k]))
                    xh, Pc, _ = static_filter_step(xh, Pc, C, Dinv[i][k], dys[i][:, k], dt)
                else:
                    md = models[i]
                    xh = xh + (dys[i][:, k] - (xh @ md.Hobs[k].T) * dt) @ md.L[k].T
                xs[:, k + 1] = xh
            est.append(xs)
        out = []
        state_cost = dt * (0.5 * np.einsum("pi,kij,pj->p", theta, H[:K], theta) + theta @ F[:K].sum(axis=0))
        for s in strat_list:
            u = np.concatenate([np.einsum("kdn,pkn->pkd", s.gains[i], est[i]) + s.offsets[i] for i in range(N)],
                               axis=2)
            cost = state_cost + dt * (
                0.5 * np.einsum("pki,kij,pkj->p", u[:, :K], R[:K], u[:, :K])
                + np.einsum("pki,kij,pj->p", u[:, :K], E[:K], theta)
                + np.einsum("pki,ki->p", u[:, :K], m[:K])
            )
            ens = Ensemble(costs=cost, x_final=theta, xhat_final=[e[:, -1] for e in est],
                           innovation_total=[d.sum(axis=1) - np.einsum("pkn,kjn->pj", e[:, :K], mdl.Hobs[:K]) * dt
                                             if mdl is not None else None
                                             for d, e, mdl in zip(dys, est, models)])
            if record:
                ens.x = np.broadcast_to(theta[:, None], (P, K + 1, n)).copy()
                ens.y, ens.xhat = ys, est
                ens.u = [u[:, :, spec.control_slice(i)] for i in range(N)]
                ens.dB = [np.concatenate([dB[:, :, spec.obs_slice(i)], np.zeros((P, 1, kb[i]))], axis=1)
                          for i in range(N)]
            out.append(ens)
        return out

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run_chunk, starts))
    else:
        parts = [run_chunk(s) for s in starts]
    results = [_merge([p[j] for p in parts]) for j in range(len(strat_list))]
    return results[0] if single else results


def _merge(parts):
    def cat(attr):
        first = getattr(parts[0], attr)
        if first is None:
            return None
        if isinstance(first, list):
            return [None if first[i] is None else np.concatenate([getattr(p, attr)[i] for p in parts])
                    for i in range(len(first))]
        return np.concatenate([getattr(p, attr) for p in parts])

    return Ensemble(**{name: cat(name) for name in Ensemble.__dataclass_fields__})
