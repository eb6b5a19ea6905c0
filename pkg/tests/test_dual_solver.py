import numpy as np
import pytest

from conftest import mean_se
from levydual.dual_domain import ControlBasis, drift_h, feasibility_check, stochastic_exponential
from levydual.dual_solver import (
    EPS_F,
    AuditRow,
    SearchSpace,
    _DualProblem,
    _projected_descent,
    budget_residual,
    candidate_wealth,
    dual_value,
    outer_minimize,
    super_hedging_cost_estimate,
    weak_duality_audit,
)
from levydual.errors import DomainError, ValidationError
from levydual.market_model import FiniteAtoms, LevyMarketSpec, Strategy, simulate_paths
from levydual.utility import ConstantClaim, PutClaim, QuadraticLoss, make_shortfall_utility


def v_closed(y):
    """Dual of the unit-capped quadratic shortfall utility under a unit deflator."""
    return np.where(y < 2, 1 - y + y * y / 4, 0.0)


@pytest.fixture(scope="module")
def small_jump(jump_ensemble):
    return jump_ensemble.subset(2000)


# -- driftless market: xi = 1 is the only local-martingale deflator ---------

@pytest.mark.parametrize("y", [0.0, 0.3, 1.0, 1.9, 2.5])
def test_driftless_dual_value(driftless_spec, driftless_ensemble, quad_unit, y):
    _, (est, se) = dual_value(driftless_spec, quad_unit, y, driftless_ensemble)
    assert est == pytest.approx(float(v_closed(y)), abs=1e-12)
    assert se <= 1e-12


def test_negative_y_rejected(driftless_spec, driftless_ensemble, quad_unit):
    with pytest.raises(ValidationError):
        dual_value(driftless_spec, quad_unit, -1.0, driftless_ensemble)


def test_driftless_outer_problem(driftless_spec, driftless_ensemble, quad_unit):
    res = outer_minimize(driftless_spec, quad_unit, 0.9, driftless_ensemble)
    assert res.y_star == pytest.approx(0.2, abs=1e-6)
    assert res.primal_bound == pytest.approx(1 - 0.1 ** 2, abs=1e-9)
    assert res.w_hat == pytest.approx(1.0)
    np.testing.assert_allclose(res.wealth, 0.9)
    assert res.budget_residual <= 1e-12
    assert set(res.to_dict()) >= {"z", "y_star", "v_value", "primal_bound", "dual_element"}


def test_outer_problem_domain(driftless_spec, driftless_ensemble, quad_unit):
    with pytest.raises(DomainError):
        outer_minimize(driftless_spec, quad_unit, 1.0, driftless_ensemble)
    with pytest.raises(ValidationError):
        outer_minimize(driftless_spec, quad_unit, 0.0, driftless_ensemble)


def test_candidate_wealth_and_budget(quad_unit):
    xi = np.array([0.5, 1.0, 1.5, 4.0])
    V = candidate_wealth(quad_unit, 1.0, xi, np.ones(4))
    np.testing.assert_allclose(V, [0.75, 0.5, 0.25, 0.0])
    resid, se = budget_residual(V, xi, 0.5)
    assert resid == pytest.approx(abs(np.mean(V * xi) - 0.5))
    assert se == pytest.approx(np.std(V * xi, ddof=1) / 2)
    with pytest.raises(ValidationError):
        candidate_wealth(quad_unit, 0.0, xi, np.ones(4))


# -- weak-duality audit ----------------------------------------------------

def test_audit_examples(driftless_spec, driftless_ensemble, quad_unit):
    space = SearchSpace(driftless_spec, driftless_ensemble)
    d = space.element(np.zeros(0))
    rows = weak_duality_audit(driftless_spec, quad_unit, 0.5, [Strategy.constant(0.0)], d, 1.0,
                              driftless_ensemble)
    assert rows[0].primal == pytest.approx(0.75)
    assert rows[0].bound == pytest.approx(0.75)
    assert not rows[0].violation
    rows = weak_duality_audit(driftless_spec, quad_unit, 0.5,
                              [Strategy.constant(0.0), Strategy.constant(2.0)], d, 0.5,
                              driftless_ensemble)
    assert rows[0].bound == pytest.approx(0.8125)
    assert rows[0].gap == pytest.approx(0.0625)
    assert all(r.admissible and not r.violation for r in rows)
    assert len(rows[1].as_row()) == len(AuditRow.header)


def test_audit_exclusions(jump_spec, small_jump, quad_unit):
    space = SearchSpace(jump_spec, small_jump)
    d = space.element(space.theta_from_element(None))
    rows = weak_duality_audit(jump_spec, quad_unit, 0.5,
                              [Strategy.constant(5.0), Strategy.constant(3.3), Strategy.constant(1.0)],
                              d, 1.0, small_jump)
    assert not rows[0].admissible and "interval" in rows[0].reason
    assert not rows[1].admissible and "negative" in rows[1].reason
    assert rows[2].admissible and not rows[2].violation
    with pytest.raises(ValidationError):
        weak_duality_audit(jump_spec, quad_unit, 0.5, [], d, 0.0, small_jump)


# -- search space ----------------------------------------------------------

def test_projection_properties(jump_spec, small_jump):
    space = SearchSpace(jump_spec, small_jump, ControlBasis.uniform(1.0, 2))
    rng = np.random.default_rng(0)
    for _ in range(50):
        theta = rng.normal(0, 3, space.n_params)
        p = space.project(theta)
        np.testing.assert_allclose(space.project(p), p, atol=1e-12)
        f = p.reshape(space.nb, space.k, 2)
        for j in range(space.nb):
            for x in (space.xmin[j], space.xmax[j]):
                assert np.all(f[j, :, 0] + f[j, :, 1] * x >= -1 + EPS_F - 1e-12)


def test_projection_keeps_zero_drift_without_diffusion():
    spec = LevyMarketSpec(b=0.05, jumps=FiniteAtoms((-0.3, 0.4), (0.5, 0.5)))
    ens = simulate_paths(spec, 10, 500, seed=3)
    space = SearchSpace(spec, ens)
    rng = np.random.default_rng(1)
    for _ in range(20):
        d = space.element(space.project(rng.normal(0, 2, space.n_params)))
        G, F, _ = d.controls(0.0, ens.log_s[:, :-1])
        assert np.all(F >= -1 + EPS_F - 1e-12)
        t = np.broadcast_to(ens.times[:-1], (500, 10))
        assert np.max(np.abs(drift_h(spec, d, t, ens.log_s[:, :-1]))) <= 1e-12


@pytest.mark.parametrize("spec", [
    LevyMarketSpec(b=0.05, jumps=FiniteAtoms((-0.3, 0.4), (0.5, 0.5))),
    LevyMarketSpec(b=-0.02, jumps=FiniteAtoms((-0.3, 0.2, 0.5), (0.5, 1.0, 0.2))),
    LevyMarketSpec(b=0.05, sigma=0.2, jumps=FiniteAtoms((-0.3, 0.4), (0.3, 0.3))),
])
def test_projection_is_nearest_point(spec):
    # the projection p of u satisfies (u - p) . (q - p) <= 0 for every feasible q
    space = SearchSpace(spec, simulate_paths(spec, 10, 300, seed=3))
    rng = np.random.default_rng(6)
    feasible = [space.project(rng.normal(0, 2, space.n_params)) for _ in range(40)]
    for _ in range(40):
        u = rng.normal(0, 2, space.n_params) * rng.choice([0.1, 1.0, 5.0])
        p = space.project(u)
        for q in feasible:
            assert (u - p) @ (q - p) <= 1e-9 * (1 + np.abs(u).max()) ** 2


def test_drift_without_noise_rejected():
    spec = LevyMarketSpec(b=0.05)
    with pytest.raises(ValidationError):
        SearchSpace(spec, simulate_paths(spec, 5, 10, 0))


def test_elements_are_local_martingale_deflators(jump_spec, small_jump):
    space = SearchSpace(jump_spec, small_jump, ControlBasis.uniform(1.0, 2))
    rng = np.random.default_rng(2)
    for _ in range(10):
        d = space.element(space.project(rng.normal(0, 0.5, space.n_params)))
        rep = feasibility_check(jump_spec, d, small_jump)
        assert rep.feasible
        t = np.broadcast_to(small_jump.times[:-1], (small_jump.n_paths, small_jump.n_steps))
        assert np.max(np.abs(drift_h(jump_spec, d, t, small_jump.log_s[:, :-1]))) <= 1e-12


def test_fast_path_matches_direct_evaluation(jump_spec, small_jump):
    space = SearchSpace(jump_spec, small_jump, ControlBasis.uniform(1.0, 2))
    theta = space.project(np.random.default_rng(4).normal(0, 0.5, space.n_params))
    direct = stochastic_exponential(small_jump, space.element(theta))[:, -1]
    np.testing.assert_allclose(np.exp(space.log_xi_T(theta)), direct, rtol=1e-10)


def test_gradient_matches_finite_differences(jump_spec, small_jump, quad_unit):
    prob = _DualProblem(jump_spec, quad_unit, small_jump, ControlBasis.uniform(1.0, 2))
    fun = prob.objective(0.8)
    theta = prob.space.project(np.random.default_rng(5).normal(0, 0.3, prob.space.n_params))
    _, g = fun(theta)
    eps = 1e-6
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = eps
        fd = (fun(theta + e)[0] - fun(theta - e)[0]) / (2 * eps)
        assert fd == pytest.approx(g[i], rel=1e-4, abs=1e-8)


def test_descent_stops_at_the_domain_edge():
    # objective decreases toward an edge beyond which it is undefined
    def fun(theta):
        return (float(theta[0]), np.ones(1)) if theta[0] > 0 else (None, None)

    theta, val = _projected_descent(fun, np.array([1e-12]), lambda t: t, iters=20, step0=1.0)
    assert 0 < theta[0] <= 1e-12 and val == theta[0]


def test_deterministic(jump_spec, small_jump, quad_unit):
    a = dual_value(jump_spec, quad_unit, 0.7, small_jump)
    b = dual_value(jump_spec, quad_unit, 0.7, small_jump)
    assert a[1] == b[1]
    np.testing.assert_array_equal(a[0].f, b[0].f)


def test_search_beats_the_starting_density(jump_spec, small_jump, quad_unit):
    space = SearchSpace(jump_spec, small_jump)
    start = space.element(space.theta_from_element(None))
    xi0 = stochastic_exponential(small_jump, start)[:, -1]
    base = float(np.mean(quad_unit.dual(0.7 * xi0, 1.0)))
    _, (est, _) = dual_value(jump_spec, quad_unit, 0.7, small_jump)
    assert est <= base + 1e-12


# -- super-hedging cost and full solve -------------------------------------

def test_superhedge_constant_claim(jump_spec, small_jump):
    u = make_shortfall_utility(QuadraticLoss(), ConstantClaim(0.7))
    est, se, d = super_hedging_cost_estimate(jump_spec, u, small_jump)
    xi = stochastic_exponential(small_jump, d)[:, -1]
    m, s = mean_se(0.7 * xi)
    assert est == pytest.approx(m)
    # every local-martingale deflator here is a true martingale
    assert abs(est - 0.7) <= 4 * s + 1e-3


def test_superhedge_exceeds_risk_neutral_price(jump_spec, small_jump):
    u = make_shortfall_utility(QuadraticLoss(), PutClaim(1.1))
    est, _, _ = super_hedging_cost_estimate(jump_spec, u, small_jump)
    space = SearchSpace(jump_spec, small_jump)
    xi = stochastic_exponential(small_jump, space.element(space.theta_from_element(None)))[:, -1]
    assert est >= float(np.mean(xi * u.cap(small_jump.S_T))) - 1e-12


def test_jump_solve_budget_invariant(jump_spec, small_jump, quad_unit):
    res = outer_minimize(jump_spec, quad_unit, 0.5, small_jump)
    assert 0 < res.y_star
    assert res.budget_residual <= max(3 * res.budget_se, 1e-10)
    assert np.all((res.wealth >= 0) & (res.wealth <= 1.0))
    assert res.primal_bound == pytest.approx(res.v_value + 0.5 * res.y_star)
    # any finite y and any deflator give an upper bound; the optimum is below them all
    for y, v, _ in res.trace:
        assert res.primal_bound <= v + 0.5 * y + 1e-9
