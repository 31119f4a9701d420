import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from krflow.background import ball, build_preset, domain_family, general_family, perturbed_ball
from krflow.flow import (
    FlowState,
    OutOfRange,
    SolverConfig,
    SolverFailure,
    boundary_value,
    epsilon_continuation,
    family_boundary_value,
    initial_state,
    normalized_to_unnormalized_time,
    rescale_to_normalized,
    rhs,
    run,
    step,
    total_eigenvalues,
)
from krflow.oracle import solve_for_family
from krflow.radial_geometry import RadialGrid, ricci_potential
from krflow.estimates import relative_sup
from oracles import log_integral


def ball_family(mode="unnormalized", m=401, y_max=12.0, c=0.5, n=2):
    g = RadialGrid(n, 1.0, y_max, m)
    return domain_family(mode, build_preset(f"euclidean({c})", g, "metric"), ball(g))


def hyperbolic_family(mode="general-normalized", m=401):
    g = RadialGrid(2, 1.0, 12.0, m)
    return general_family(mode, build_preset("euclidean(0.5)", g, "metric"), build_preset("hyperbolic-bg", g))


def integrate(state, bf, dt, t_end, cfg=SolverConfig()):
    """Constant-step backward Euler from ``state`` to ``t_end``."""
    k = int(round((t_end - state.t) / dt))
    for _ in range(k):
        state = step(state, bf, cfg=cfg, dt=dt)
    return state


# --- right-hand side ---------------------------------------------------------

def test_rhs_at_center_from_closed_forms():
    bf = ball_family()
    st0 = FlowState("unnormalized", 0.0, 0.1, np.zeros(bf.grid.m), np.zeros(bf.grid.m))
    r = rhs(st0, bf)
    assert r[0] == pytest.approx(2 * math.log(0.8), abs=1e-12)
    assert r[0] == pytest.approx(-0.4463, abs=1e-4)


@pytest.mark.parametrize("mode", ["normalized", "general-normalized"])
def test_rhs_vanishes_at_the_limit(mode):
    bf = ball_family(mode) if mode == "normalized" else hyperbolic_family(mode)
    bf = bf.with_omega0(bf.base)  # background equal to the limit base for all t
    sol = solve_for_family(bf)
    st0 = FlowState(mode, 40.0, 0.0, sol.u_inf, np.zeros(bf.grid.m))
    assert np.max(np.abs(rhs(st0, bf))) <= 1e-10


def test_rhs_vanishes_at_perturbed_limit():
    g = RadialGrid(2, 1.0, 12.0, 401)
    bf = domain_family("normalized", build_preset("euclidean(0.5)", g, "metric"), perturbed_ball(g, 0.5))
    bf = bf.with_omega0(bf.base)
    sol = solve_for_family(bf)
    assert np.ptp(sol.u_inf) > 1e-2
    st0 = FlowState("normalized", 40.0, 0.0, sol.u_inf, np.zeros(g.m))
    assert np.max(np.abs(rhs(st0, bf))[:-1]) <= 1e-10


def test_general_constant_solution_substitution():
    bf = hyperbolic_family().with_omega0(hyperbolic_family().base)
    u = np.full(bf.grid.m, 2 * math.log(3))
    r = rhs(FlowState(bf.mode, 50.0, 0.0, u, u * 0), bf)
    assert np.max(np.abs(r)) <= 1e-8


# --- boundary value ----------------------------------------------------------

def test_boundary_value_unnormalized_example():
    v = boundary_value("unnormalized", 1.0, 0.0, 3.0, 0.0, 0.0, 2)
    assert v == pytest.approx(2 * (math.log(3) - 1), rel=1e-12)
    assert v == pytest.approx(0.19722, abs=1e-5)
    assert v == pytest.approx(2 * log_integral(1.0, 0.0, 3.0, 0.0), rel=1e-8)


@pytest.mark.parametrize("mode", ["unnormalized", "normalized", "general-unnormalized", "general-normalized"])
def test_boundary_value_starts_at_zero(mode):
    assert boundary_value(mode, 0.0, 0.1, 3.0, 0.4, 0.5, 2, 1.0) == 0.0


def test_boundary_value_general_limit():
    v = boundary_value("general-normalized", math.inf, 0.0, 1.0, 0.0, 0.0, 2, 3.0)
    assert v == pytest.approx(2 * math.log(3), rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(t=st.floats(0.01, 3.0), eps=st.floats(0.0, 0.3), c=st.floats(0.0, 2.0), f=st.floats(-1.0, 1.0))
def test_boundary_value_matches_quadrature(t, eps, c, f):
    v = boundary_value("unnormalized", t, eps, 3.0, f, c, 2)
    q = 2 * log_integral(t, c, 3.0, eps) + t * f
    assert v == pytest.approx(q, rel=1e-7, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(t=st.floats(0.05, 1.0), eps=st.floats(0.01, 0.3))
def test_normalized_boundary_value_solves_its_ode(t, eps):
    lam, n = 3.0, 2
    v = lambda s: boundary_value("normalized", s, eps, lam, 0.0, 0.5, n)
    dt = 1e-5
    dv = (v(t + dt) - v(t - dt)) / (2 * dt)
    e = math.exp(-lam * t)
    rate = n * math.log(0.5 * e + (1 - e) + lam * eps * e) - lam * v(t)
    assert dv == pytest.approx(rate, rel=1e-5, abs=1e-7)


def test_negative_time_is_rejected():
    with pytest.raises(ValueError):
        boundary_value("unnormalized", -1.0, 0.0, 3.0)


# --- one step ----------------------------------------------------------------

def test_first_step_is_consistent():
    bf = ball_family()
    s0 = initial_state(bf, 0.1)
    dt = 1e-4
    s1 = step(s0, bf, dt=dt)
    assert np.max(np.abs(s1.u)) <= dt * (np.max(np.abs(s0.udot)) + 1)
    assert total_eigenvalues(bf, s1.t, s1.eps, s1.u).is_positive()


def test_fixed_point_is_invariant_under_a_step():
    bf = ball_family("normalized")
    bf = bf.with_omega0(bf.base)
    cfg = SolverConfig(newton_tol=1e-11)
    s0 = FlowState("normalized", 10.0, 0.0, np.zeros(bf.grid.m), np.zeros(bf.grid.m))
    s1 = step(s0, bf, cfg=cfg, dt=0.01)
    assert np.max(np.abs(s1.u)) <= cfg.newton_tol


def test_step_doubling_is_first_order():
    bf = ball_family()
    start = run(bf, 0.05, SolverConfig(horizon=0.1, dt_max=1e-3), output_times=[0.1])
    s = FlowState(bf.mode, 0.1, 0.05, start.u[-1], start.udot[-1])
    U = [integrate(s, bf, dt, 0.5).u for dt in (0.02, 0.01, 0.005)]
    ratio = np.max(np.abs(U[0] - U[1])) / np.max(np.abs(U[1] - U[2]))
    assert 1.7 <= ratio <= 2.3


@settings(max_examples=15, deadline=None)
@given(
    a=st.floats(-0.05, 0.05), k=st.floats(0.5, 6.0),
    b=st.floats(0.0, 0.05), c=st.floats(0.0, 1.0), t=st.floats(0.0, 1.0),
)
def test_step_preserves_order(a, k, b, c, t):
    # smooth functions of rho, so flat in y towards the cutoff
    bf = ball_family(m=201)
    rho = bf.grid.rho
    u = a * np.sin(k * rho)
    v = u + b * np.exp(-((rho - c) ** 2) / 0.1)
    su = FlowState(bf.mode, t, 0.05, u, np.zeros_like(u))
    sv = FlowState(bf.mode, t, 0.05, v, np.zeros_like(v))
    su = FlowState(bf.mode, t, 0.05, u, rhs(su, bf))
    sv = FlowState(bf.mode, t, 0.05, v, rhs(sv, bf))
    nu = step(su, bf, dt=0.01)
    nv = step(sv, bf, dt=0.01)
    assert np.all(nu.u <= nv.u + 1e-12)


# --- runs --------------------------------------------------------------------

def test_center_value_inside_precise_bracket():
    bf = ball_family()
    eps = 0.05
    traj = run(bf, eps, SolverConfig(horizon=1.0), output_times=[1.0])
    assert 2 * log_integral(1.0, 0.0, 3.0, 0.0) == pytest.approx(0.19722, abs=1e-5)
    assert 2 * log_integral(1.0, 0.5, 3.0, 0.0) == pytest.approx(1.15416, abs=1e-5)
    lo = 2 * log_integral(1.0, 0.0, 3.0, eps)
    hi = 2 * log_integral(1.0, 0.5, 3.0, eps)
    assert lo == pytest.approx(2 * (1.05 * math.log(3.15) - 1 - 0.05 * math.log(0.15)), rel=1e-9)
    assert lo <= traj.u[-1, 0] <= hi


def test_zero_horizon_gives_single_snapshot():
    traj = run(ball_family(), 0.1, SolverConfig(horizon=0.0), output_times=[0.5])
    assert traj.times.tolist() == [0.0]
    np.testing.assert_array_equal(traj.u, 0.0)


def test_runs_are_deterministic():
    bf = ball_family(m=201)
    cfg = SolverConfig(horizon=0.3)
    a = run(bf, 0.05, cfg, output_times=[0.1, 0.2])
    b = run(bf, 0.05, cfg, output_times=[0.1, 0.2])
    np.testing.assert_array_equal(a.u, b.u)
    np.testing.assert_array_equal(a.udot, b.udot)
    np.testing.assert_array_equal(a.step_times, b.step_times)


def test_snapshots_and_positivity():
    bf = ball_family(m=201)
    traj = run(bf, 0.05, SolverConfig(horizon=0.5), output_times=[0.1, 0.25], record_all=True)
    assert traj.times[0] == 0.0 and np.all(np.diff(traj.times) > 0)
    for t in (0.1, 0.25, 0.5):
        traj.index_of(t)
    np.testing.assert_array_equal(traj.u[0], 0.0)
    for k in range(len(traj.times)):
        assert traj.eigenvalues(k).is_positive()


def test_far_node_follows_the_discrete_far_field_ode():
    bf = ball_family(m=201)
    exact = family_boundary_value(bf, 1.0, 0.05)
    errs = []
    for k in (1, 2, 4):
        cfg = SolverConfig(horizon=1.0, dt_max=0.01 / k, kappa=0.1 / k)
        errs.append(abs(run(bf, 0.05, cfg).u[-1, -1] - exact))
    # backward Euler: first order in the step size
    assert 1.6 <= errs[0] / errs[1] <= 2.4 and 1.6 <= errs[1] / errs[2] <= 2.4


def test_eps_must_be_positive():
    with pytest.raises(ValueError):
        run(ball_family(), 0.0, SolverConfig())


@pytest.mark.parametrize("kwargs", [
    dict(dt_max=0.0), dict(kappa=-1.0), dict(newton_tol=1e-14), dict(newton_max_iter=0), dict(horizon=-1.0),
])
def test_solver_config_validation(kwargs):
    with pytest.raises(ValueError):
        SolverConfig(**kwargs)


def test_forced_newton_failure_reports_diagnostics():
    bf = ball_family(m=51)
    cfg = SolverConfig(dt_max=1.0, kappa=100.0, newton_max_iter=1, max_halvings=0, horizon=1.0)
    with pytest.raises(SolverFailure) as info:
        run(bf, 0.1, cfg)
    d = info.value.diagnostics
    assert d["t"] == 0.0 and d["eps"] == 0.1 and "Newton" in d["reason"]


# --- eps continuation --------------------------------------------------------

def test_ladder_deltas_decrease():
    bf = ball_family()
    cont = epsilon_continuation(bf, [0.1, 0.05, 0.025, 0.0125], SolverConfig(horizon=1.0), [0.25, 0.5, 0.75])
    d = cont.deltas
    assert len(d) == 3
    assert all(b < a for a, b in zip(d, d[1:]))


def test_single_member_ladder_has_no_deltas():
    cont = epsilon_continuation(ball_family(m=201), [0.1], SolverConfig(horizon=0.2))
    assert cont.deltas == []


@pytest.mark.parametrize("ladder", [[0.05, 0.1], [0.1, 0.1], [0.1, -0.05], []])
def test_ladder_validation(ladder):
    with pytest.raises(ValueError):
        epsilon_continuation(ball_family(m=51), ladder, SolverConfig(horizon=0.1))


def test_ladders_with_common_final_eps_agree():
    bf = ball_family(m=201)
    cfg = SolverConfig(horizon=0.5)
    a = epsilon_continuation(bf, [0.1, 0.05, 0.025], cfg, [0.25])
    b = epsilon_continuation(bf, [0.2, 0.025], cfg, [0.25])
    diff = np.max(np.abs(a.trajectories[-1].u - b.trajectories[-1].u))
    assert diff <= 4 * a.deltas[-1]


# --- rescaling ---------------------------------------------------------------

def test_normalized_time_map():
    assert normalized_to_unnormalized_time(0.2, 3.0) == pytest.approx((math.exp(0.6) - 1) / 3)
    assert normalized_to_unnormalized_time(0.2, 3.0) == pytest.approx(0.27404, abs=1e-5)
    assert normalized_to_unnormalized_time(0.0, 3.0) == 0.0


def test_rescaling_at_time_zero_is_identity():
    bf = ball_family(m=201)
    traj = run(bf, 0.05, SolverConfig(horizon=0.3))
    e = rescale_to_normalized(traj, [0.0])[0]
    e0 = total_eigenvalues(bf, 0.0, 0.05, np.zeros(bf.grid.m))
    np.testing.assert_allclose(e.a, e0.a, rtol=1e-14)
    np.testing.assert_allclose(e.b, e0.b, rtol=1e-14)


def test_rescaling_out_of_range():
    traj = run(ball_family(m=201), 0.05, SolverConfig(horizon=0.2))
    with pytest.raises(OutOfRange):
        rescale_to_normalized(traj, [0.2])
    with pytest.raises(ValueError):
        rescale_to_normalized(run(ball_family("normalized", m=201), 0.05, SolverConfig(horizon=0.1)), [0.05])


def test_rescaling_agrees_with_direct_normalized_run_at_first_order():
    bf = ball_family(m=201)
    t_nor = 0.5
    s = float(normalized_to_unnormalized_time(t_nor, 3.0))
    errs = []
    for dt in (0.004, 0.002):
        un = run(bf, 0.05, SolverConfig(horizon=s, dt_max=dt), output_times=np.linspace(0, s, 121)[1:])
        no = run(bf.with_mode("normalized"), 0.05, SolverConfig(horizon=t_nor, dt_max=dt / 4))
        errs.append(relative_sup(rescale_to_normalized(un, [t_nor])[0], no.eigenvalues(len(no.times) - 1)))
    assert errs[1] < errs[0] < 2e-2


@pytest.mark.slow
def test_general_normalized_flow_reaches_the_constant_at_rate_t_exp_minus_t():
    bf = hyperbolic_family()
    traj = run(bf, 0.0125, SolverConfig(horizon=12.0), output_times=[8.0, 10.0, 12.0])
    err = np.array([np.max(np.abs(traj.u[traj.index_of(t)] - 2 * math.log(3))) for t in (8.0, 10.0, 12.0)])
    assert err[-1] <= 1e-3
    scaled = err * np.exp([8.0, 10.0, 12.0]) / np.array([8.0, 10.0, 12.0])
    assert np.ptp(scaled) <= 0.2 * scaled.mean()
