"""Grid solver: interpolation/tails, policy iteration, finite horizon."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jumpctl.generator import AnalyticField, hjb_integrand
from jumpctl.hjb import (
    DENSE_NODE_LIMIT,
    ConvergenceReport,
    Grid,
    HJBProblem,
    PolicyTable,
    SchemeWarning,
    SolverError,
    ValueField,
    _assemble_operator,
    _best_candidates,
    _TailBasis,
    dpp_residual,
    interior_mask,
    policy_evaluation,
    policy_improvement,
    solve_finite_horizon,
    solve_stationary,
)
from jumpctl.lq import LQSpec, solve_lq
from jumpctl.measures import Action, AtomicMeasure, ZeroMeasure

B_HAT = (np.sqrt(13.0) - 3.0) / 2.0


def brownian_action(mu=0.0):
    return Action(sigma=1.0, nu=ZeroMeasure(1), mu=mu)


def jump_origin_entry(x):
    # jump-to-origin control with compensating drift; degenerates to the
    # plain diffusion action at the origin itself
    if abs(x) <= 1e-12:
        return brownian_action()
    return Action(sigma=1.0, nu=AtomicMeasure(1, [[-x]], [1.0]), mu=-x)


def singleton_problem(f, qd, action=None, q_growth=2):
    return HJBProblem(
        f=f, q=qd, delta_q=qd, b_q=qd,
        actions=(action if action is not None else brownian_action(),),
        q_growth=q_growth,
    )


def example1_problem(qd=1.0):
    return HJBProblem(
        f=lambda x, a: x**2, q=qd, delta_q=qd, b_q=qd,
        actions=(brownian_action(), jump_origin_entry), q_growth=2,
    )


def lq_product_problem(lam=1.0, theta=1.0, qd=3.0, lattice=None):
    lattice = np.linspace(-3.0, 3.0, 41) if lattice is None else lattice

    def f(x, a):
        return lam * x**2 + theta * float(a.mu[0]) ** 2

    return HJBProblem(
        f=f, q=qd, delta_q=qd, b_q=qd,
        sigma_nu_pairs=((1.0, ZeroMeasure(1)),), mu_lattice=lattice, q_growth=2,
    )


# ---------------------------------------------------------------------------
# grid and field plumbing


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid.regular(0.0, 0.0, 32)
    with pytest.raises(ValueError):
        Grid.regular(-1.0, 1.0, 8)
    with pytest.raises(ValueError):
        Grid.regular([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [16, 16, 16])
    g = Grid.regular([-1.0, 0.0], [1.0, 2.0], [17, 16])
    assert g.dim == 2 and g.n_nodes == 17 * 16
    assert g.h[0] == pytest.approx(0.125)


def test_field_requires_finite_values():
    g = Grid.regular(-1.0, 1.0, 17)
    with pytest.raises(ValueError):
        ValueField(grid=g, values=np.full(17, np.nan))
    with pytest.raises(ValueError):
        ValueField(grid=g, values=-np.ones(17), nonneg=True)


def test_interpolation_exact_on_affine():
    g = Grid.regular(-2.0, 3.0, 21)
    fld = ValueField(grid=g, values=2.0 * g.axes[0] + 1.0, q_growth=1)
    xs = np.array([-1.97, 0.013, 2.5, 3.0, -2.0])
    assert np.abs(fld.value(xs) - (2.0 * xs + 1.0)).max() < 1e-12


def test_tail_extrapolation_exact_on_quadratic():
    g = Grid.regular(-2.0, 2.0, 33)
    fld = ValueField(grid=g, values=g.axes[0] ** 2, q_growth=2)
    assert fld.value(3.0) == pytest.approx(9.0, abs=1e-9)
    assert fld.value(-2.7) == pytest.approx(2.7**2, abs=1e-9)
    assert fld.tail_residual < 1e-10
    assert fld.tail_degree <= 2


def test_tail_cubic_needs_declared_degree():
    g = Grid.regular(-2.0, 2.0, 33)
    x = g.axes[0]
    exact = ValueField(grid=g, values=x**3, q_growth=3)
    assert exact.value(2.5) == pytest.approx(2.5**3, abs=1e-8)
    capped = ValueField(grid=g, values=x**3, q_growth=2)
    assert capped.tail_residual > 1e-4  # quadratic band fit cannot carry x^3


def test_field_eval_2d_bilinear():
    g = Grid.regular([-1.0, 0.0], [1.0, 2.0], [17, 19])
    X = g.nodes()

    def f(p):
        return 2.0 + 3.0 * p[:, 0] - p[:, 1] + 0.5 * p[:, 0] * p[:, 1]

    fld = ValueField(grid=g, values=f(X).reshape(g.shape), q_growth=2)
    pts = np.array([[0.3, 1.1], [-0.99, 0.02], [1.0, 2.0]])
    assert np.abs(fld.value(pts) - f(pts)).max() < 1e-12
    out = np.array([[1.4, 1.0]])  # beyond hi on axis 0
    assert fld.value(out)[0] == pytest.approx(f(out)[0], abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3.0, 3.0), b=st.floats(-3.0, 3.0), x=st.floats(-1.99, 1.99))
def test_interpolation_reproduces_affine_property(a, b, x):
    g = Grid.regular(-2.0, 2.0, 23)
    fld = ValueField(grid=g, values=a * g.axes[0] + b, q_growth=1)
    assert fld.value(x) == pytest.approx(a * x + b, abs=1e-10)


def test_interior_mask():
    g = Grid.regular(-1.0, 1.0, 17)
    m = interior_mask(g)
    assert m.sum() == 15 and not m[0] and not m[-1]


# ---------------------------------------------------------------------------
# problem validation


def test_problem_needs_exactly_one_action_mode():
    with pytest.raises(ValueError):
        HJBProblem(f=0.0, q=1.0, delta_q=1.0, b_q=1.0)
    with pytest.raises(ValueError):
        HJBProblem(
            f=0.0, q=1.0, delta_q=1.0, b_q=1.0,
            actions=(brownian_action(),),
            sigma_nu_pairs=((1.0, ZeroMeasure(1)),), mu_lattice=np.linspace(-1, 1, 5),
        )
    with pytest.raises(ValueError):
        HJBProblem(f=0.0, q=1.0, delta_q=0.0, b_q=1.0, actions=(brownian_action(),))
    with pytest.raises(ValueError):
        HJBProblem(
            f=0.0, q=1.0, delta_q=1.0, b_q=1.0,
            sigma_nu_pairs=((1.0, ZeroMeasure(1)),),
            mu_lattice=np.array([0.0, 0.5, 2.0]),  # non-uniform
        )


def test_negative_running_cost_rejected():
    g = Grid.regular(-1.0, 1.0, 17)
    prob = singleton_problem(lambda x, a: x, 1.0)  # signed cost
    pol = PolicyTable(grid=g, action_index=np.zeros(17, dtype=int))
    with pytest.raises(ValueError, match="nonnegative"):
        policy_evaluation(pol, prob, g)


def test_discount_bound_enforced():
    g = Grid.regular(-1.0, 1.0, 17)
    prob = HJBProblem(
        f=0.0, q=lambda x, a: 1.0 + np.abs(x), delta_q=1.0, b_q=1.5,
        actions=(brownian_action(),),
    )
    pol = PolicyTable(grid=g, action_index=np.zeros(17, dtype=int))
    with pytest.raises(ValueError, match="declared bounds"):
        policy_evaluation(pol, prob, g)


# ---------------------------------------------------------------------------
# policy evaluation


def test_evaluation_zero_cost():
    g = Grid.regular(-2.0, 2.0, 33)
    prob = singleton_problem(0.0, 1.0)
    pol = PolicyTable(grid=g, action_index=np.zeros(g.n_nodes, dtype=int))
    phi = policy_evaluation(pol, prob, g)
    assert np.abs(phi.values).max() < 1e-12


def test_evaluation_constant_cost_with_jumps():
    # f = q * c makes phi == c; the nonlocal part must annihilate constants
    g = Grid.regular(-2.0, 2.0, 33)
    act = Action(sigma=1.0, nu=AtomicMeasure(1, [[0.7], [-1.3]], [0.5, 0.25]), mu=0.2)
    prob = singleton_problem(lambda x, a: 2.0 * 1.5, 2.0, action=act)
    pol = PolicyTable(grid=g, action_index=np.zeros(g.n_nodes, dtype=int))
    phi = policy_evaluation(pol, prob, g)
    assert np.abs(phi.values - 1.5).max() < 1e-10


def test_evaluation_exact_on_quadratic_resolvent():
    # singleton Brownian action, f = x^2, q = 1: phi = x^2 + 1 solves the
    # equation exactly, and every stencil ingredient is exact on quadratics
    g = Grid.regular(-4.0, 4.0, 101)
    prob = singleton_problem(lambda x, a: x**2, 1.0)
    pol = PolicyTable(grid=g, action_index=np.zeros(g.n_nodes, dtype=int))
    phi = policy_evaluation(pol, prob, g)
    assert np.abs(phi.values - (g.axes[0] ** 2 + 1.0)).max() < 1e-9


def test_evaluation_2d_exact_quadratic():
    g = Grid.regular([-2.0, -2.0], [2.0, 2.0], [21, 17])
    act = Action(sigma=np.eye(2), nu=ZeroMeasure(2), mu=[0.0, 0.0])
    prob = HJBProblem(
        f=lambda x, a: x[:, 0] ** 2 + x[:, 1] ** 2, q=1.0, delta_q=1.0, b_q=1.0,
        actions=(act,),
    )
    pol = PolicyTable(grid=g, action_index=np.zeros(g.n_nodes, dtype=int))
    phi = policy_evaluation(pol, prob, g)
    X = g.nodes()
    target = (X[:, 0] ** 2 + X[:, 1] ** 2 + 2.0).reshape(g.shape)
    assert np.abs(phi.values - target).max() < 1e-8


def test_evaluation_lq_feedback_matches_closed_form():
    sol = solve_lq(LQSpec(lam=1.0, theta=1.0, q=3.0,
                          dispersion_candidates=[(1.0, ZeroMeasure(1))]))
    gain = sol.Q[0, 0]

    def feedback(x):
        return Action(sigma=1.0, nu=ZeroMeasure(1), mu=-gain * x)

    g = Grid.regular(-6.0, 6.0, 201)
    prob = HJBProblem(
        f=lambda x, a: x**2 + float(a.mu[0]) ** 2, q=3.0, delta_q=3.0, b_q=3.0,
        actions=(feedback,), q_growth=2,
    )
    pol = PolicyTable(grid=g, action_index=np.zeros(g.n_nodes, dtype=int))
    phi = policy_evaluation(pol, prob, g)
    x = g.axes[0]
    keep = np.abs(x) <= 2.0
    err = np.abs(phi.values[keep] - sol.value(x[keep].reshape(-1, 1)))
    assert err.max() / np.abs(sol.value(x[keep].reshape(-1, 1))).max() < 1e-2


def test_scheme_warning_on_correlated_diffusion():
    g = Grid.regular([-1.0, -1.0], [1.0, 1.0], [16, 16])
    act = Action(sigma=np.array([[1.0, 0.5], [0.0, 1.0]]), nu=ZeroMeasure(2), mu=[0.0, 0.0])
    prob = HJBProblem(f=0.0, q=1.0, delta_q=1.0, b_q=1.0, actions=(act,))
    pol = PolicyTable(grid=g, action_index=np.zeros(g.n_nodes, dtype=int))
    with pytest.warns(SchemeWarning):
        policy_evaluation(pol, prob, g)


def test_assembly_agrees_with_generator_module():
    # with drift equal to the measure mean the first-order part cancels and
    # the discrete integrand matches the analytic generator on a quadratic
    g = Grid.regular(-4.0, 4.0, 81)  # h = 0.1, atoms land on nodes
    nu = AtomicMeasure(1, [[0.5], [-1.0]], [1.0, 0.5])
    mu = float(nu.masses @ nu.locations[:, 0])
    act = Action(sigma=1.0, nu=nu, mu=mu)
    prob = singleton_problem(lambda x, a: x**2, 1.0, action=act)
    phi = ValueField(grid=g, values=g.axes[0] ** 2 + 1.0, q_growth=2)
    best, _ = _best_candidates(phi, prob, g)
    fld = AnalyticField(lambda x: x[0] ** 2 + 1.0,
                        grad=lambda x: np.array([2.0 * x[0]]),
                        hess=lambda x: np.array([[2.0]]))
    i = 40  # x = 0, interior, all jump destinations on nodes
    x = g.axes[0][i]
    want = hjb_integrand(act, fld, x, f_val=x**2, q_val=1.0)
    assert best[i] == pytest.approx(want, abs=1e-9)


# ---------------------------------------------------------------------------
# policy improvement


def test_improvement_singleton():
    g = Grid.regular(-2.0, 2.0, 33)
    prob = singleton_problem(lambda x, a: x**2, 1.0)
    phi = ValueField(grid=g, values=g.axes[0] ** 2, q_growth=2)
    pol = policy_improvement(phi, prob, g)
    assert np.all(pol.action_index == 0)


def test_improvement_empty_action_set():
    with pytest.raises(ValueError):
        HJBProblem(f=0.0, q=1.0, delta_q=1.0, b_q=1.0, actions=())


def test_improvement_selects_jump_to_origin_far_out():
    g = Grid.regular(-6.0, 6.0, 121)
    prob = example1_problem()
    v = g.axes[0] ** 2 / 2.0 + 0.5
    phi = ValueField(grid=g, values=v, q_growth=2)
    pol = policy_improvement(phi, prob, g)
    x = g.axes[0]
    far = np.abs(x) >= 1.0
    assert np.all(pol.action_index[far] == 1)
    assert pol.action_index[np.argmin(np.abs(x))] == 0  # tie at the origin


def test_improvement_lq_drift_near_feedback():
    sol = solve_lq(LQSpec(lam=1.0, theta=1.0, q=3.0))
    gain = sol.Q[0, 0]
    g = Grid.regular(-6.0, 6.0, 201)
    lattice = np.linspace(-3.0, 3.0, 41)
    prob = lq_product_problem(lattice=lattice)
    phi = ValueField(grid=g, values=B_HAT * g.axes[0] ** 2 + B_HAT / 3.0, q_growth=2)
    pol = policy_improvement(phi, prob, g)
    cell = lattice[1] - lattice[0]
    inner = interior_mask(g)
    target = -gain * g.axes[0]
    assert np.abs(pol.mu[inner, 0] - target[inner]).max() <= cell


# ---------------------------------------------------------------------------
# stationary solves


def test_stationary_singleton_equals_evaluation():
    g = Grid.regular(-2.0, 2.0, 33)
    prob = singleton_problem(lambda x, a: x**2, 1.0)
    pol0 = PolicyTable(grid=g, action_index=np.zeros(g.n_nodes, dtype=int))
    direct = policy_evaluation(pol0, prob, g)
    phi, pol, rep = solve_stationary(prob, g)
    assert rep.converged
    assert np.abs(phi.values - direct.values).max() < 1e-12


def test_stationary_lq_matches_closed_form():
    g = Grid.regular(-6.0, 6.0, 201)
    prob = lq_product_problem()
    phi, pol, rep = solve_stationary(prob, g, tol=1e-8)
    assert rep.converged
    x = g.axes[0]
    keep = np.abs(x) <= 2.0
    target = B_HAT * x**2 + B_HAT / 3.0
    rel = np.abs(phi.values[keep] - target[keep]).max() / np.abs(target[keep]).max()
    assert rel < 1e-2
    assert rep.max_pointwise_increase <= 1e-8 * max(1.0, np.abs(phi.values).max())


def test_stationary_example1_exact_on_quadratic():
    g = Grid.regular(-6.0, 6.0, 241)
    prob = example1_problem()
    phi, pol, rep = solve_stationary(prob, g, tol=1e-10)
    assert rep.converged
    x = g.axes[0]
    target = x**2 / 2.0 + 0.5
    keep = np.abs(x) <= 4.0
    rel = np.abs(phi.values[keep] - target[keep]).max() / np.abs(target[keep]).max()
    assert rel < 2e-2
    # jump control active away from the origin (strict improvement there)
    tol_sel = 1e-8
    psi_excess = x**2 / 2.0  # psi(x) - psi(0)
    must_jump = psi_excess > tol_sel
    assert np.all(pol.action_index[must_jump] == 1)


def test_stationary_residual_sign():
    g = Grid.regular(-6.0, 6.0, 121)
    prob = example1_problem()
    phi, pol, rep = solve_stationary(prob, g, tol=1e-10)
    assert rep.converged
    assert rep.residual <= 1e-7
    best, _ = _best_candidates(phi, prob, g)
    inner = interior_mask(g)
    assert best[inner].min() >= -1e-7


def test_stationary_comparison_in_cost():
    g = Grid.regular(-4.0, 4.0, 65)
    lo, _, _ = solve_stationary(example1_problem(), g)
    prob_hi = HJBProblem(
        f=lambda x, a: x**2 + 0.5, q=1.0, delta_q=1.0, b_q=1.0,
        actions=(brownian_action(), jump_origin_entry), q_growth=2,
    )
    hi, _, _ = solve_stationary(prob_hi, g)
    assert np.all(hi.values >= lo.values - 1e-10)


def test_stationary_nonconvergence_reported():
    g = Grid.regular(-4.0, 4.0, 65)
    phi, pol, rep = solve_stationary(example1_problem(), g, tol=1e-14, max_iters=1)
    assert not rep.converged
    assert rep.messages
    assert np.all(np.isfinite(phi.values))


def test_solved_field_tail_is_polynomial():
    g = Grid.regular(-6.0, 6.0, 201)
    phi, _, _ = solve_stationary(lq_product_problem(), g)
    assert phi.tail_degree <= 2
    assert phi.tail_residual <= 1e-6 * max(1.0, np.abs(phi.values).max())


# ---------------------------------------------------------------------------
# finite horizon


def test_finite_horizon_pure_discount_exact():
    g = Grid.regular(-2.0, 2.0, 33)
    act = Action(sigma=0.0, nu=ZeroMeasure(1), mu=0.0)
    prob = singleton_problem(0.0, 3.0, action=act)
    sol = solve_finite_horizon(prob, h=2.5, T=1.0, n_steps=37, grid=g)
    expect = 2.5 * np.exp(-3.0 * 1.0)
    assert np.abs(sol.values[0] - expect).max() < 1e-12
    assert sol.times[0] == 0.0 and sol.times[-1] == 1.0


def test_finite_horizon_one_step_identity():
    # one backward step with f == 0 solves (I - dt L) phi0 = e^{-q dt} h
    g = Grid.regular(-2.0, 2.0, 33)
    prob = singleton_problem(0.0, 1.5)
    hvals = g.axes[0] ** 2
    sol = solve_finite_horizon(prob, h=hvals, T=0.25, n_steps=1, grid=g)
    pol = PolicyTable(grid=g, action_index=np.zeros(g.n_nodes, dtype=int))
    from jumpctl.hjb import _TailBasis as TB

    L, qvec, fvec = _assemble_operator(prob, pol, g, TB(g, prob.q_growth))
    lhs = (np.eye(g.n_nodes) - 0.25 * L.toarray()) @ sol.values[0].ravel()
    rhs = np.exp(-1.5 * 0.25) * hvals
    assert np.abs(lhs - rhs).max() < 1e-10


def test_finite_horizon_approaches_stationary():
    g = Grid.regular(-4.0, 4.0, 65)
    prob = singleton_problem(lambda x, a: x**2, 1.0)
    stat, _, _ = solve_stationary(prob, g)
    keep = np.abs(g.axes[0]) <= 2.0

    def gap(T, n):
        sol = solve_finite_horizon(prob, h=0.0, T=T, n_steps=n, grid=g)
        return np.abs(sol.values[0][keep] - stat.values[keep]).max()

    g1, g2, g4 = gap(1.0, 100), gap(2.0, 200), gap(4.0, 400)
    assert g2 < g1 and g4 < g2
    assert gap(8.0, 800) < 5e-2  # transient e^{-qT} has died off by T = 8


def test_finite_horizon_input_validation():
    g = Grid.regular(-2.0, 2.0, 33)
    prob = singleton_problem(0.0, 1.0)
    with pytest.raises(ValueError):
        solve_finite_horizon(prob, h=1.0, T=0.0, n_steps=4, grid=g)
    with pytest.raises(ValueError):
        solve_finite_horizon(prob, h=lambda x: -np.ones_like(x), T=1.0, n_steps=4, grid=g)


def test_dpp_residual_zero_horizon():
    g = Grid.regular(-2.0, 2.0, 33)
    prob = singleton_problem(lambda x, a: x**2, 1.0)
    phi = ValueField(grid=g, values=g.axes[0] ** 2 + 1.0, q_growth=2)
    assert dpp_residual(phi, prob, t=0.0, n_paths=10, seed=0) == 0.0


def test_dpp_gap_vanishes_on_resolvent():
    # phi = x^2 + 1 is the exact one-action value, so the programming
    # principle holds with equality; the Monte Carlo gap is pure noise
    # plus O(h^2) interpolation of the terminal value.
    from jumpctl.hjb import dpp_report

    g = Grid.regular(-2.0, 2.0, 33)
    prob = singleton_problem(lambda x, a: x**2, 1.0)
    phi = ValueField(grid=g, values=g.axes[0] ** 2 + 1.0, q_growth=2)
    rep = dpp_report(phi, prob, t=0.75, n_paths=4000, seed=314, dt=0.01)
    for entry in rep.per_probe:
        assert abs(entry["gap"]) <= 3 * entry["se"] + 0.01
    # deterministic given the seed
    assert dpp_residual(phi, prob, t=0.75, n_paths=400, seed=9, dt=0.01) == \
        dpp_residual(phi, prob, t=0.75, n_paths=400, seed=9, dt=0.01)


def test_dpp_detects_missing_control():
    # the controlled value x^2/2 + 1/2 needs the jump-to-origin action;
    # with it in the trial set the gap is noise, without it the gap is
    # strictly positive at probes away from the origin.
    from jumpctl.dynamics import PolicyFieldSpec
    from jumpctl.hjb import dpp_report

    g = Grid.regular(-2.0, 2.0, 33)
    prob = example1_problem()
    phi = ValueField(grid=g, values=0.5 * g.axes[0] ** 2 + 0.5, q_growth=2)
    brown = PolicyFieldSpec.constant(brownian_action())
    relocate = PolicyFieldSpec.jump_to_origin(rate=1.0, sigma=1.0, dim=1)
    full = dpp_report(
        phi, prob, t=0.6, n_paths=1500, seed=77, dt=0.012,
        policies=[brown, relocate],
    )
    for entry in full.per_probe:
        assert entry["gap"] >= -(3 * entry["se"] + 0.01)
        assert abs(entry["gap"]) <= 3 * entry["se"] + 0.02
    starved = dpp_report(
        phi, prob, t=0.6, n_paths=1500, seed=77, dt=0.012, policies=[brown]
    )
    assert starved.residual > 0.2
