"""Problem definitions and result containers shared by every solver.

Time-varying coefficients are stored either as a constant array or as a
stack of per-node samples whose leading axis runs over the grid nodes
``t_0 .. t_K``.  :class:`Schedule` hides the difference and provides the
off-node values the Runge-Kutta stages need.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from .errors import SpecError

SYM_RTOL = 1e-9


def _frozen(a, ndmin=None):
    a = np.array(a, dtype=float)
    if ndmin is not None and a.ndim < ndmin:
        a = a.reshape((1,) * (ndmin - a.ndim) + a.shape)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on ``[0, T]``.

    ``dt`` is snapped to ``T / num_steps`` after checking that the requested
    step divides the horizon to one part in 10^9.
    """

    T: float
    dt: float

    def __post_init__(self):
        T, dt = float(self.T), float(self.dt)
        if not (T > 0 and dt > 0):
            raise SpecError(f"grid needs T > 0 and dt > 0, got T={T}, dt={dt}")
        K = int(round(T / dt))
        if K < 1 or abs(K * dt - T) > 1e-9 * T:
            raise SpecError(f"dt={dt} does not divide T={T}")
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "dt", T / K)

    @property
    def num_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.num_steps + 1)

    def __len__(self):
        return self.num_steps + 1

    def node_of(self, t: float) -> int:
        return int(round(t / self.dt))


# cubic Lagrange weights for the midpoint of [k, k+1] given nodes (k-1, k, k+1, k+2)
_MID_W = np.array([-1.0, 9.0, 9.0, -1.0]) / 16.0
# same, for the first interval where only nodes (k, k+1, k+2, k+3) exist
_EDGE_W = np.array([5.0, 15.0, -5.0, 1.0]) / 16.0


class Schedule:
    """A coefficient sampled on the grid nodes.

    Calling the schedule at a time between nodes evaluates the cubic
    Lagrange interpolant through the four surrounding nodes, so the
    interpolation error stays below the fourth-order integrator error.
    """

    def __init__(self, values, grid: TimeGrid, constant: bool = False):
        self.grid = grid
        self.constant = constant
        self._mid = None
        self.values = values if constant else np.asarray(values, dtype=float)
        if not constant and self.values.shape[0] != len(grid):
            raise SpecError(
                f"tabulated schedule has {self.values.shape[0]} samples, grid has {len(grid)} nodes"
            )

    @classmethod
    def of(cls, value, grid: TimeGrid, base_ndim: int) -> "Schedule":
        """Wrap a constant (``base_ndim`` dims) or tabulated (one extra leading axis) value."""
        a = np.asarray(value, dtype=float)
        if a.ndim == base_ndim:
            return cls(a, grid, constant=True)
        if a.ndim == base_ndim + 1:
            return cls(a, grid)
        raise SpecError(f"coefficient has ndim {a.ndim}, expected {base_ndim} or {base_ndim + 1}")

    def at(self, k: int) -> np.ndarray:
        return self.values if self.constant else self.values[k]

    def table(self) -> np.ndarray:
        if self.constant:
            return np.broadcast_to(self.values, (len(self.grid),) + self.values.shape)
        return self.values

    def _midpoints(self):
        v, K = self.values, self.grid.num_steps
        if K < 3:
            return 0.5 * (v[:-1] + v[1:])
        mid = np.empty((K,) + v.shape[1:])
        mid[1:K - 1] = np.tensordot(_MID_W, np.stack([v[0:K - 2], v[1:K - 1], v[2:K], v[3:K + 1]]), axes=1)
        mid[0] = np.tensordot(_EDGE_W, v[:4], axes=1)
        mid[K - 1] = np.tensordot(_EDGE_W[::-1], v[K - 3:], axes=1)
        return mid

    def __call__(self, t: float) -> np.ndarray:
        if self.constant:
            return self.values
        K = self.grid.num_steps
        s = t / self.grid.dt
        half = int(round(2 * s))
        if abs(2 * s - half) < 1e-9 and 0 <= half <= 2 * K:
            if half % 2 == 0:
                return self.values[half // 2]
            if self._mid is None:
                self._mid = self._midpoints()
            return self._mid[half // 2]
        if K < 3:
            lo = min(max(int(np.floor(s)), 0), K - 1)
            w = s - lo
            return (1 - w) * self.values[lo] + w * self.values[lo + 1]
        lo = int(np.floor(s))
        start = min(max(lo - 1, 0), K - 3)
        xs = np.arange(start, start + 4, dtype=float)
        w = np.ones(4)
        for a in range(4):
            for b in range(4):
                if a != b:
                    w[a] *= (s - xs[b]) / (xs[a] - xs[b])
        return np.tensordot(w, self.values[start:start + 4], axes=1)


def _offsets(sizes):
    out = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    return [slice(out[i], out[i + 1]) for i in range(len(sizes))]


@dataclass(frozen=True)
class LqTeamSpec:
    """Coefficient bundle of the linear-quadratic team problem.

    Dynamics ``dx = (A x + B u) dt + G dW`` with per-DM observations
    ``dy^i = C^{[i]} x dt + D_ii^{1/2} dB^i`` and running cost
    ``1/2 u'Ru + 1/2 x'Hx + x'F + u'Ex + u'm`` plus ``1/2 x(T)' M_T x(T)``.
    ``C`` stacks the per-DM row blocks (sizes ``k_blocks``) and ``D`` is
    block diagonal with the same partition.
    """

    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    C: np.ndarray
    D: np.ndarray
    H: np.ndarray
    R: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    n_blocks: tuple
    d_blocks: tuple
    k_blocks: tuple
    m_blocks: tuple = ()
    E: np.ndarray | None = None
    m: np.ndarray | None = None
    F: np.ndarray | None = None
    M_T: np.ndarray | None = None

    def __post_init__(self):
        for name in ("A", "B", "G", "C", "D", "H", "R"):
            object.__setattr__(self, name, _frozen(getattr(self, name), ndmin=2))
        object.__setattr__(self, "mean", _frozen(self.mean, ndmin=1))
        object.__setattr__(self, "cov", _frozen(self.cov, ndmin=2))
        n, d = sum(self.n_blocks), sum(self.d_blocks)
        if self.E is None:
            object.__setattr__(self, "E", _frozen(np.zeros((d, n))))
        if self.m is None:
            object.__setattr__(self, "m", _frozen(np.zeros(d)))
        if self.F is None:
            object.__setattr__(self, "F", _frozen(np.zeros(n)))
        if self.M_T is None:
            object.__setattr__(self, "M_T", _frozen(np.zeros((n, n))))
        object.__setattr__(self, "E", _frozen(self.E, ndmin=2))
        object.__setattr__(self, "m", _frozen(self.m, ndmin=1))
        object.__setattr__(self, "F", _frozen(self.F, ndmin=1))
        object.__setattr__(self, "M_T", _frozen(self.M_T, ndmin=2))
        for name in ("n_blocks", "d_blocks", "k_blocks", "m_blocks"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if not self.m_blocks:
            object.__setattr__(self, "m_blocks", (self.G.shape[-1],))
        if not (len(self.d_blocks) == len(self.k_blocks)):
            raise SpecError("d_blocks and k_blocks must list one entry per decision maker")

    @property
    def N(self) -> int:
        return len(self.d_blocks)

    @property
    def n(self) -> int:
        return sum(self.n_blocks)

    @property
    def d(self) -> int:
        return sum(self.d_blocks)

    @property
    def k(self) -> int:
        return sum(self.k_blocks)

    @property
    def noise_dim(self) -> int:
        return sum(self.m_blocks)

    def control_slice(self, i: int) -> slice:
        return _offsets(self.d_blocks)[i]

    def obs_slice(self, i: int) -> slice:
        return _offsets(self.k_blocks)[i]

    def state_slice(self, i: int) -> slice:
        return _offsets(self.n_blocks)[i]

    def schedule(self, name: str, grid: TimeGrid) -> Schedule:
        value = getattr(self, name)
        base = 1 if name in ("m", "F", "mean") else 2
        return Schedule.of(value, grid, base)

    def replace(self, **changes) -> "LqTeamSpec":
        return replace(self, **changes)

    def with_zero_noise(self) -> "LqTeamSpec":
        return self.replace(G=np.zeros_like(self.G), cov=np.zeros_like(self.cov))


@dataclass(frozen=True)
class BroadcastSpec:
    """Static Gaussian message observed by ``N`` receivers through noisy channels.

    ``C`` holds one entry per receiver: a ``(k_i, n)`` array, a tabulated
    ``(K+1, k_i, n)`` stack, or a callable ``C_i(t, y)`` for channels whose
    gain depends on the receiver's own output.  Callables must accept a batch
    ``y`` of shape ``(P, k_i)`` and return ``(P, k_i, n)``; each needs a
    declared Lipschitz bound in ``lipschitz``.
    """

    C: tuple
    D: np.ndarray
    H: np.ndarray
    R: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    d_blocks: tuple
    k_blocks: tuple
    E: np.ndarray | None = None
    m: np.ndarray | None = None
    F: np.ndarray | None = None
    lipschitz: tuple = ()

    def __post_init__(self):
        cs = tuple(c if callable(c) else _frozen(c, ndmin=2) for c in self.C)
        object.__setattr__(self, "C", cs)
        for name in ("D", "H", "R"):
            object.__setattr__(self, name, _frozen(getattr(self, name), ndmin=2))
        object.__setattr__(self, "mean", _frozen(self.mean, ndmin=1))
        object.__setattr__(self, "cov", _frozen(self.cov, ndmin=2))
        n, d = self.mean.shape[-1], sum(self.d_blocks)
        if self.E is None:
            object.__setattr__(self, "E", np.zeros((d, n)))
        if self.m is None:
            object.__setattr__(self, "m", np.zeros(d))
        if self.F is None:
            object.__setattr__(self, "F", np.zeros(n))
        object.__setattr__(self, "E", _frozen(self.E, ndmin=2))
        object.__setattr__(self, "m", _frozen(self.m, ndmin=1))
        object.__setattr__(self, "F", _frozen(self.F, ndmin=1))
        object.__setattr__(self, "d_blocks", tuple(int(v) for v in self.d_blocks))
        object.__setattr__(self, "k_blocks", tuple(int(v) for v in self.k_blocks))
        lip = tuple(self.lipschitz) if self.lipschitz else tuple(None for _ in self.C)
        object.__setattr__(self, "lipschitz", lip)

    @property
    def N(self) -> int:
        return len(self.d_blocks)

    @property
    def n(self) -> int:
        return self.mean.shape[-1]

    @property
    def d(self) -> int:
        return sum(self.d_blocks)

    @property
    def k(self) -> int:
        return sum(self.k_blocks)

    @property
    def feedback(self) -> bool:
        return any(callable(c) for c in self.C)

    def control_slice(self, i: int) -> slice:
        return _offsets(self.d_blocks)[i]

    def obs_slice(self, i: int) -> slice:
        return _offsets(self.k_blocks)[i]

    def schedule(self, name: str, grid: TimeGrid) -> Schedule:
        base = 1 if name in ("m", "F", "mean") else 2
        return Schedule.of(getattr(self, name), grid, base)

    def channel(self, i: int, grid: TimeGrid) -> Schedule:
        if callable(self.C[i]):
            raise SpecError(f"channel {i} is output-dependent; no fixed schedule exists")
        return Schedule.of(self.C[i], grid, 2)

    def replace(self, **changes) -> "BroadcastSpec":
        return replace(self, **changes)


@dataclass(frozen=True)
class Trajectory:
    """One sample path on the grid.

    Increment arrays carry ``K + 1`` rows like everything else; row ``k``
    holds the increment over ``[t_k, t_{k+1}]`` and the last row is zero.
    """

    t: np.ndarray
    x: np.ndarray
    y: tuple
    xhat: tuple
    u: tuple
    dW: np.ndarray
    dB: tuple
    seed: int
    path_index: int = 0


@dataclass(frozen=True)
class DecentralizedStrategy:
    """Affine laws ``u^i = gains[i](t) @ xhat^i(t) + offsets[i](t)``.

    ``xhat^i`` is DM ``i``'s own filter output, so adaptedness holds by
    construction.  ``mean_control`` is the schedule of ``E[u]`` the filters
    use in place of the other decision makers' actions.
    """

    gains: tuple
    offsets: tuple
    mean_control: np.ndarray
    filter_kind: str = "team_coupled"

    def __post_init__(self):
        object.__setattr__(self, "gains", tuple(_frozen(g) for g in self.gains))
        object.__setattr__(self, "offsets", tuple(_frozen(o) for o in self.offsets))
        object.__setattr__(self, "mean_control", _frozen(self.mean_control))
        if len(self.gains) != len(self.offsets):
            raise SpecError("one gain and one offset schedule per decision maker required")
        n_nodes = self.mean_control.shape[0]
        for g, o in zip(self.gains, self.offsets):
            if g.shape[0] != n_nodes or o.shape[0] != n_nodes:
                raise SpecError("strategy schedules must be defined on every grid node")

    @property
    def N(self) -> int:
        return len(self.gains)

    @property
    def d_blocks(self) -> tuple:
        return tuple(g.shape[1] for g in self.gains)

    def control(self, i: int, k: int, xhat: np.ndarray) -> np.ndarray:
        return self.gains[i][k] @ xhat + self.offsets[i][k]

    def with_law(self, i: int, gain=None, offset=None) -> "DecentralizedStrategy":
        gains, offsets = list(self.gains), list(self.offsets)
        if gain is not None:
            gains[i] = gain
        if offset is not None:
            offsets[i] = offset
        return replace(self, gains=tuple(gains), offsets=tuple(offsets))

    def combine(self, other: "DecentralizedStrategy", eps: float) -> "DecentralizedStrategy":
        """``self + eps * other`` on the law schedules; ``other`` is a difference."""
        return replace(
            self,
            gains=tuple(g + eps * h for g, h in zip(self.gains, other.gains)),
            offsets=tuple(o + eps * p for o, p in zip(self.offsets, other.offsets)),
        )

    def minus(self, other: "DecentralizedStrategy") -> "DecentralizedStrategy":
        return replace(
            self,
            gains=tuple(g - h for g, h in zip(self.gains, other.gains)),
            offsets=tuple(o - p for o, p in zip(self.offsets, other.offsets)),
        )


@dataclass
class SolverReport:
    scenario: str
    status: str = "converged"
    riccati: list = field(default_factory=list)
    sigma: np.ndarray | None = None
    offsets: list = field(default_factory=list)
    mean_state: np.ndarray | None = None
    mean_control: np.ndarray | None = None
    filter_covariances: list = field(default_factory=list)
    iterations: int = 0
    residuals: list = field(default_factory=list)
    terminal_residuals: dict = field(default_factory=dict)
    condition_numbers: np.ndarray | None = None
    closure: str = ""
    tolerance: float = 0.0

    def summary(self) -> dict:
        out = {
            "scenario": self.scenario,
            "status": self.status,
            "iterations": self.iterations,
            "residuals": [float(r) for r in self.residuals],
            "terminal_residuals": {k: float(v) for k, v in self.terminal_residuals.items()},
            "max_condition_number": (
                float(np.max(self.condition_numbers)) if self.condition_numbers is not None else None
            ),
            "closure": self.closure,
            "tolerance": self.tolerance,
        }
        return out

    def to_dict(self, include_schedules: bool = True) -> dict:
        out = self.summary()
        if include_schedules:
            def lst(a):
                return None if a is None else np.asarray(a).tolist()
            out["schedules"] = {
                "riccati": [lst(K) for K in self.riccati],
                "sigma": lst(self.sigma),
                "offsets": [lst(r) for r in self.offsets],
                "mean_state": lst(self.mean_state),
                "mean_control": lst(self.mean_control),
                "filter_covariances": [lst(P) for P in self.filter_covariances],
                "condition_numbers": lst(self.condition_numbers),
            }
        return out


@dataclass(frozen=True)
class ValidationOutcome:
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def _stack(a, base_ndim):
    a = np.asarray(a, dtype=float)
    return a[None] if a.ndim == base_ndim else a


def _check_sym(name, X, out, definite=None, tol_psd=SYM_RTOL):
    """Append violations for a (possibly tabulated) matrix."""
    Xs = _stack(X, 2)
    for k, M in enumerate(Xs):
        where = f" at node {k}" if Xs.shape[0] > 1 else ""
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            out.append(f"dimension mismatch: {name} is not square{where}")
            return
        if not np.all(np.isfinite(M)):
            out.append(f"{name} has non-finite entries{where}")
            return
        scale = 1.0 + np.max(np.abs(M), initial=0.0)
        if np.max(np.abs(M - M.T), initial=0.0) > SYM_RTOL * scale:
            out.append(f"{name} not symmetric{where}")
            return
        if M.shape[0] == 0 or definite is None:
            continue
        lo = np.linalg.eigvalsh(0.5 * (M + M.T))[0]
        if definite == "pd" and not lo > 0:
            out.append(f"{name} not positive definite{where}")
            return
        if definite == "psd" and lo < -tol_psd * scale:
            out.append(f"{name} not positive semidefinite{where}")
            return


def _check_shape(name, X, rows, cols, out, base_ndim=2):
    a = np.asarray(X)
    shape = a.shape[-base_ndim:] if a.ndim >= base_ndim else a.shape
    want = (rows, cols) if base_ndim == 2 else (rows,)
    if a.ndim not in (base_ndim, base_ndim + 1) or tuple(shape) != want:
        out.append(f"dimension mismatch: {name} has shape {a.shape}, expected {want}")
        return False
    return True


def _block_diag_defect(D, sizes):
    Ds = _stack(D, 2)
    mask = np.ones(Ds.shape[-2:], dtype=bool)
    for sl in _offsets(sizes):
        mask[sl, sl] = False
    return float(np.max(np.abs(Ds[:, mask]), initial=0.0))


def validate_spec(spec, grid: TimeGrid | None = None) -> ValidationOutcome:
    """Check shapes, symmetry and sign constraints; never raises."""
    out = []
    try:
        if isinstance(spec, LqTeamSpec):
            _validate_lq(spec, out)
        elif isinstance(spec, BroadcastSpec):
            _validate_broadcast(spec, out)
        else:
            out.append(f"unknown spec type {type(spec).__name__}")
        if grid is not None:
            for f_ in fields(spec):
                v = getattr(spec, f_.name)
                if isinstance(v, np.ndarray) and v.ndim == 3 and v.shape[0] != len(grid):
                    out.append(f"dimension mismatch: {f_.name} tabulated on {v.shape[0]} nodes, grid has {len(grid)}")
    except Exception as exc:  # diagnostic result, never throws
        out.append(f"validation error: {exc}")
    return ValidationOutcome(tuple(out))


def _validate_lq(s: LqTeamSpec, out):
    n, d, k, mw = s.n, s.d, s.k, s.noise_dim
    ok = all([
        _check_shape("A", s.A, n, n, out),
        _check_shape("B", s.B, n, d, out),
        _check_shape("G", s.G, n, mw, out),
        _check_shape("C", s.C, k, n, out),
        _check_shape("D", s.D, k, k, out),
        _check_shape("H", s.H, n, n, out),
        _check_shape("R", s.R, d, d, out),
        _check_shape("E", s.E, d, n, out),
        _check_shape("M_T", s.M_T, n, n, out),
        _check_shape("m", s.m, d, None, out, base_ndim=1),
        _check_shape("F", s.F, n, None, out, base_ndim=1),
        _check_shape("init.mean", s.mean, n, None, out, base_ndim=1),
        _check_shape("init.cov", s.cov, n, n, out),
    ])
    if len(s.n_blocks) < 1 or s.N < 1:
        out.append("dimension mismatch: at least one decision maker required")
    if not ok:
        return
    _check_sym("R", s.R, out, "pd")
    _check_sym("H", s.H, out, "psd")
    _check_sym("M_T", s.M_T, out, "psd")
    _check_sym("P0", s.cov, out, "psd")
    _check_sym("D", s.D, out, "pd")
    for i in range(s.N):
        sl = s.obs_slice(i)
        _check_sym(f"R_{i + 1}{i + 1}", _stack(s.R, 2)[:, s.control_slice(i), s.control_slice(i)], out, "pd")
        if s.k_blocks[i] > 0:
            _check_sym(f"D_{i + 1}{i + 1}", _stack(s.D, 2)[:, sl, sl], out, "pd")
    if _block_diag_defect(s.D, s.k_blocks) > 0:
        out.append("D not block diagonal across decision makers")


def _validate_broadcast(s: BroadcastSpec, out):
    n, d, k = s.n, s.d, s.k
    if len(s.C) != s.N:
        out.append("dimension mismatch: one channel gain per receiver required")
        return
    ok = all([
        _check_shape("D", s.D, k, k, out),
        _check_shape("H", s.H, n, n, out),
        _check_shape("R", s.R, d, d, out),
        _check_shape("E", s.E, d, n, out),
        _check_shape("m", s.m, d, None, out, base_ndim=1),
        _check_shape("F", s.F, n, None, out, base_ndim=1),
        _check_shape("init.cov", s.cov, n, n, out),
    ])
    for i, c in enumerate(s.C):
        if callable(c):
            if s.lipschitz[i] is None:
                out.append(f"channel {i + 1} is output-dependent but declares no Lipschitz bound")
        else:
            ok &= _check_shape(f"C_{i + 1}{i + 1}", c, s.k_blocks[i], n, out)
    if not ok:
        return
    _check_sym("R", s.R, out, "pd")
    _check_sym("H", s.H, out, "psd")
    _check_sym("P0", s.cov, out, "psd")
    _check_sym("D", s.D, out, "pd")
    for i in range(s.N):
        sl = s.obs_slice(i)
        _check_sym(f"R_{i + 1}{i + 1}", _stack(s.R, 2)[:, s.control_slice(i), s.control_slice(i)], out, "pd")
        _check_sym(f"D_{i + 1}{i + 1}", _stack(s.D, 2)[:, sl, sl], out, "pd")
    if _block_diag_defect(s.D, s.k_blocks) > 0:
        out.append("D not block diagonal across receivers")


def diag_blocks(X: np.ndarray, sizes: Sequence[int]) -> list:
    return [X[..., sl, sl] for sl in _offsets(sizes)]


SpecLike = LqTeamSpec | BroadcastSpec
ChannelGain = Callable[[float, np.ndarray], np.ndarray]
