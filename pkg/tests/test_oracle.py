import math

import numpy as np
import pytest

from krflow.background import background_metric, ball, build_preset, cheng_yau_f, perturbed_ball
from krflow.oracle import OracleFailure, ke_residual, limit_boundary_value, solve_limit
from krflow.radial_geometry import RadialGrid, RadialPotential, ricci_potential
from krflow.estimates import relative_sup


def perturbed_solution(m=801, **kw):
    g = RadialGrid(2, 1.0, 12.0, m)
    df = perturbed_ball(g, 0.5)
    return g, solve_limit("normalized", background_metric(df), cheng_yau_f(df), **kw)


def hyperbolic_solution(m=801, n=2, **kw):
    g = RadialGrid(n, 1.0, 12.0, m)
    hb = build_preset("hyperbolic-bg", g)
    return g, solve_limit("general-normalized", -ricci_potential(hb), reference=hb, **kw)


def test_ball_limit_is_zero():
    g = RadialGrid(2, 1.0, 12.0, 801)
    sol = solve_limit("normalized", background_metric(ball(g)), cheng_yau_f(ball(g)), tol=1e-11)
    assert sol.residual_norm <= 1e-11
    np.testing.assert_allclose(sol.u_inf, 0.0, atol=1e-11)
    assert sol.eigenvalues().is_positive()


@pytest.mark.parametrize("n", [1, 2, 3])
def test_general_hyperbolic_limit_is_constant(n):
    g, sol = hyperbolic_solution(n=n)
    assert sol.residual_norm <= 1e-11
    assert np.max(np.abs(sol.u_inf - n * math.log(n + 1))) <= 1e-8
    if n == 2:
        assert sol.u_inf[0] == pytest.approx(2.19722, abs=1e-5)


def test_general_boundary_constant():
    g = RadialGrid(2, 1.0, 12.0, 401)
    hb = build_preset("hyperbolic-bg", g)
    ub = limit_boundary_value("general-normalized", -ricci_potential(hb), None, 2, hb)
    assert ub == pytest.approx(2 * math.log(3), abs=1e-9)


def test_domain_boundary_constant_is_f_over_n_plus_one():
    g = RadialGrid(2, 4.0, 12.0, 401)
    ub = limit_boundary_value("normalized", background_metric(ball(g)), cheng_yau_f(ball(g)), 2)
    assert ub == pytest.approx(math.log(4.0) / 3, rel=1e-12)


def test_perturbed_defining_function_gives_the_ball_metric():
    g, sol = perturbed_solution()
    ball_sol = solve_limit("normalized", background_metric(ball(g)), cheng_yau_f(ball(g)))
    assert np.max(np.abs(sol.u_inf)) > 1e-2  # genuinely nonconstant
    assert np.ptp(sol.u_inf) > 1e-2
    assert relative_sup(sol.eigenvalues(), ball_sol.eigenvalues()) < 1e-4


def test_quadratic_convergence_in_final_iterations():
    _, sol = perturbed_solution(tol=1e-12)
    r = sol.history
    assert len(r) >= 4
    for prev, nxt in zip(r[-3:-1], r[-2:]):
        assert nxt <= 100 * prev**2


@pytest.mark.parametrize("solver", [perturbed_solution, hyperbolic_solution])
def test_initial_guess_independence(solver):
    tol = 1e-11
    _, a = solver(tol=tol)
    g, b = solver(tol=tol, initial=np.ones(801))
    assert np.max(np.abs(a.u_inf - b.u_inf)) <= 10 * tol


def test_grid_refinement_is_second_order():
    fields = []
    for m in (201, 401, 801):
        _, sol = perturbed_solution(m=m)
        fields.append(sol.u_inf)
    d1 = np.max(np.abs(fields[0] - fields[1][::2]))
    d2 = np.max(np.abs(fields[1] - fields[2][::2]))
    assert 3.0 <= d1 / d2 <= 5.0


def test_tolerance_floor():
    g = RadialGrid(2, 1.0, 8.0, 81)
    with pytest.raises(ValueError):
        solve_limit("normalized", background_metric(ball(g)), tol=1e-13)


def test_general_mode_needs_reference_metric():
    g = RadialGrid(2, 1.0, 8.0, 81)
    with pytest.raises(ValueError):
        solve_limit("general-normalized", background_metric(ball(g)))


def test_failure_carries_residual_history():
    with pytest.raises(OracleFailure) as info:
        perturbed_solution(max_iter=1)
    assert len(info.value.history) == 2
    assert info.value.history[-1] < info.value.history[0]


def test_ke_residual_of_ball_metric_is_small():
    g = RadialGrid(2, 1.0, 12.0, 401)
    assert ke_residual(background_metric(ball(g)), 3.0) <= 5 * g.h**2


def test_ke_residual_of_euclidean_metric_is_order_one():
    g = RadialGrid(2, 1.0, 6.0, 401)
    flat = RadialPotential.from_rho_function(g, lambda r: r, lambda r: 1 + 0 * r, lambda r: 0 * r)
    assert ke_residual(flat, 3.0) == pytest.approx(3.0, abs=1e-3)


def test_ke_residual_of_limit_metric_converges():
    res = []
    for m in (201, 401, 801):
        _, sol = perturbed_solution(m=m)
        res.append(ke_residual(sol.potential, 3.0, trim=2))
    assert res[-1] < res[0]
    assert res[-1] <= 1e-3
