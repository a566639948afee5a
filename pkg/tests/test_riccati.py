import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad, quad_vec
from scipy.linalg import expm, solve_continuous_are

from decteam.errors import FixedPointSingular, NonConvergence
from decteam.model import LqTeamSpec, TimeGrid
from decteam.riccati import (mean_field_fixed_point, solve_dm_riccatis, solve_offset_odes, solve_riccati,
                             solve_sigma_lyapunov)
from decteam.solvers import solve_broadcast_team, solve_lq_team

from scenarios import broadcast_two_dm, coupled_two_dm, singular_broadcast, unit_grid

I1 = np.eye(1)


def test_scalar_riccati_is_tanh():
    sol = solve_riccati(np.zeros((1, 1)), I1, I1, I1, np.zeros((1, 1)), unit_grid())
    assert abs(sol.K[0, 0, 0] - np.tanh(1.0)) < 1e-10
    assert sol.terminal == 0.0


def test_zero_weights_give_zero():
    sol = solve_riccati(np.eye(2), np.ones((2, 1)), I1, np.zeros((2, 2)), np.zeros((2, 2)), unit_grid(0.01))
    assert np.all(sol.K == 0)


def test_uncontrolled_value_is_a_gramian():
    A = np.array([[0.0, 1.0], [-2.0, -0.3]])
    H = np.diag([1.0, 0.5])
    M = np.eye(2)
    sol = solve_riccati(A, np.zeros((2, 1)), I1, H, M, unit_grid(1e-3))
    ref = expm(A.T) @ M @ expm(A) + quad_vec(lambda s: expm(A.T * s) @ H @ expm(A * s), 0, 1, epsabs=1e-13)[0]
    assert np.allclose(sol.K[0], ref, atol=1e-9)


def test_sigma_examples():
    g = unit_grid()
    S = solve_sigma_lyapunov(np.zeros((1, 1)), I1, np.zeros((1, 1)), g)
    assert np.allclose(S.K[:, 0, 0], 1 - g.nodes, atol=1e-12)
    S = solve_sigma_lyapunov(-I1, np.zeros((1, 1)), I1, g, G=2 * I1)
    assert abs(S.K[0, 0, 0] - np.exp(-2.0)) < 1e-10
    assert np.array_equal(S.q11, S.K @ (2 * I1))


def test_riccati_ode_residual():
    spec = coupled_two_dm()
    g = TimeGrid(1.0, 1e-2)
    K = solve_riccati(spec.A, spec.B, spec.R, spec.H, spec.M_T, g).K
    # fourth-order centred difference for K'
    dK = (-K[4:] + 8 * K[3:-1] - 8 * K[1:-3] + K[:-4]) / (12 * g.dt)
    Kc = K[2:-2]
    A, B, R, H = spec.A, spec.B, spec.R, spec.H
    res = dK + A.T @ Kc + Kc @ A + H - Kc @ B @ np.linalg.solve(R, B.T) @ Kc
    scale = 1 + np.max(np.abs(K))
    assert np.max(np.abs(res)) <= 10 * g.dt ** 4 * scale
    assert np.max(np.abs(Kc - np.swapaxes(Kc, 1, 2))) == 0.0


def test_fourth_order_convergence():
    spec = coupled_two_dm()
    vals = [solve_riccati(spec.A, spec.B, spec.R, spec.H, spec.M_T, TimeGrid(1.0, dt)).K[0] for dt in (0.1, 0.05, 0.025)]
    ratio = np.max(np.abs(vals[0] - vals[1])) / np.max(np.abs(vals[1] - vals[2]))
    assert ratio > 2 ** 3.5


psd2 = st.lists(st.floats(-1, 1), min_size=4, max_size=4).map(lambda v: np.reshape(v, (2, 2)) @ np.reshape(v, (2, 2)).T)


@settings(max_examples=15, deadline=None)
@given(psd2, psd2)
def test_monotone_in_state_weight(H, extra):
    A = np.array([[0.0, 1.0], [-1.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    g = TimeGrid(1.0, 0.02)
    lo = solve_riccati(A, B, I1, H, np.eye(2), g).K[0]
    hi = solve_riccati(A, B, I1, H + extra, np.eye(2), g).K[0]
    assert np.linalg.eigvalsh(hi - lo)[0] >= -1e-10


def test_nonpositive_terminal_is_assigned_exactly():
    sol = solve_riccati(np.zeros((1, 1)), I1, I1, I1, 0.3 * I1, unit_grid(0.1))
    assert sol.K[-1, 0, 0] == 0.3


# offsets


def _scalar_pair(A=-0.5, b=(1.0, 0.5), r12=0.4, F=0.7, m=(0.2, -0.1)):
    return LqTeamSpec(A=[[A]], B=[list(b)], G=[[0.3]], C=[[1.0], [1.0]], D=np.eye(2), H=[[1.0]],
                      R=[[1.0, r12], [r12, 2.0]], F=[F], m=list(m), mean=[0.5], cov=[[0.1]],
                      n_blocks=(1,), d_blocks=(1, 1), k_blocks=(1, 1))


def test_offsets_vanish_without_forcing():
    spec = _scalar_pair(F=0.0, m=(0.0, 0.0))
    g = unit_grid(0.01)
    Ks = [s.K for s in solve_dm_riccatis(spec, g)]
    rs = solve_offset_odes(spec, Ks, np.zeros((len(g), 2)), g)
    assert all(np.all(r == 0) for r in rs)


def test_offset_matches_integral_representation():
    """Stationary K and constant mean controls: compare with the variation-of-constants integral."""
    spec = _scalar_pair()
    g = unit_grid(1e-3)
    ubar = np.array([0.3, -0.2])
    a, B, R, F, m = spec.A[0, 0], spec.B[0], spec.R, spec.F[0], spec.m
    for i, j in ((0, 1), (1, 0)):
        Kinf = solve_continuous_are(spec.A, spec.B[:, [i]], spec.H, R[[i]][:, [i]])[0, 0]
        Ks = [np.full((len(g), 1, 1), Kinf)] * 2
        r = solve_offset_odes(spec, Ks, np.tile(ubar, (len(g), 1)), g)[i]
        acl = a - B[i] ** 2 * Kinf / R[i, i]
        force = -F + Kinf * B[i] / R[i, i] * (m[i] + R[i, j] * ubar[j]) - Kinf * B[j] * ubar[j]
        # r' = -acl r + force, r(T) = 0  =>  r(0) = -int_0^T exp(acl s) force ds
        ref = -quad(lambda s: np.exp(acl * s) * force, 0, 1, epsabs=1e-13)[0]
        assert abs(r[0, 0] - ref) < 1e-6


def test_stationary_value_is_invariant():
    spec = _scalar_pair()
    Kinf = solve_continuous_are(spec.A, spec.B[:, [0]], spec.H, spec.R[:1, :1])[0, 0]
    sol = solve_riccati(spec.A, spec.B[:, [0]], spec.R[:1, :1], spec.H, Kinf * np.eye(1), unit_grid())
    assert np.max(np.abs(sol.K[:, 0, 0] - Kinf)) < 1e-9


# fixed point


def test_decoupled_zero_mean_gives_zero_controls():
    spec = _scalar_pair(F=0.0, m=(0.0, 0.0), r12=0.0).replace(mean=np.zeros(1))
    g = unit_grid(0.01)
    fp = mean_field_fixed_point(spec, [s.K for s in solve_dm_riccatis(spec, g)], g)
    assert np.all(fp.mean_control == 0)


def test_broadcast_node_solve():
    strat, rep = solve_broadcast_team(broadcast_two_dm(), unit_grid(0.01))
    assert np.allclose(strat.mean_control, -2.0 / 3.0, atol=1e-12, rtol=0)


def test_identical_subsystems_share_mean_controls():
    blk = np.array([[0.0, 1.0], [-1.0, -0.3]])
    spec = LqTeamSpec(A=np.kron(np.eye(2), blk), B=np.kron(np.eye(2), [[0.0], [1.0]]), G=0.5 * np.eye(4),
                      C=np.kron(np.eye(2), [[1.0, 0.0]]), D=0.1 * np.eye(2), H=np.eye(4), R=np.eye(2),
                      m=[0.3, 0.3], mean=[1.0, 0.0, 1.0, 0.0], cov=0.2 * np.eye(4), n_blocks=(2, 2),
                      d_blocks=(1, 1), k_blocks=(1, 1))
    strat, _ = solve_lq_team(spec, unit_grid(0.01))
    assert np.allclose(strat.mean_control[:, 0], strat.mean_control[:, 1], atol=1e-9)


def test_singular_coupling_raises():
    spec = singular_broadcast()
    with pytest.raises(FixedPointSingular) as exc:
        solve_broadcast_team(spec, unit_grid(0.01))
    assert exc.value.node == 0 and exc.value.cond > 1e12


def test_singular_lq_coupling_raises():
    eps = 1e-13
    spec = _scalar_pair(r12=0.0).replace(R=[[1.0, 1.0 - eps], [1.0 - eps, 1.0]])
    g = unit_grid(0.01)
    with pytest.raises(FixedPointSingular):
        mean_field_fixed_point(spec, [s.K for s in solve_dm_riccatis(spec, g)], g)


def test_iteration_budget_exhaustion_reports_history():
    spec = coupled_two_dm()
    g = unit_grid(0.01)
    with pytest.raises(NonConvergence) as exc:
        mean_field_fixed_point(spec, [s.K for s in solve_dm_riccatis(spec, g)], g, max_iter=2)
    assert len(exc.value.residuals) == 2


def test_converged_point_is_a_fixed_point():
    spec = coupled_two_dm()
    g = unit_grid(0.01)
    Ks = [s.K for s in solve_dm_riccatis(spec, g)]
    fp = mean_field_fixed_point(spec, Ks, g)
    again = mean_field_fixed_point(spec, Ks, g, initial=fp.mean_control)
    assert again.iterations == 1 and again.residual <= 1e-8
    assert fp.residuals[-1] <= 1e-8


def test_damped_iteration_reaches_same_point():
    spec = coupled_two_dm()
    g = unit_grid(0.01)
    Ks = [s.K for s in solve_dm_riccatis(spec, g)]
    a = mean_field_fixed_point(spec, Ks, g, tol=1e-11)
    b = mean_field_fixed_point(spec, Ks, g, tol=1e-11, damping=0.5)
    assert np.allclose(a.mean_control, b.mean_control, atol=1e-9)


def test_mean_controls_converge_under_refinement():
    spec = coupled_two_dm()
    u = [solve_lq_team(spec, TimeGrid(1.0, dt), tol=1e-12)[0].mean_control[0] for dt in (0.1, 0.05, 0.025)]
    ratio = np.max(np.abs(u[0] - u[1])) / np.max(np.abs(u[1] - u[2]))
    assert ratio > 2 ** 1.8
