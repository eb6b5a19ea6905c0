"""End-to-end acceptance suite: eight criteria, one PASS/FAIL line each."""

import time

import cvxpy  # noqa: F401  (imported up front so solver start-up is not timed)
import numpy as np
import pytest

from levydual.dual_domain import (
    FEASIBILITY_TOL,
    ControlBasis,
    DualElement,
    drift_h,
    feasibility_check,
    martingale_lift,
    stochastic_exponential,
)
from levydual.dual_solver import (
    dual_value,
    outer_minimize,
    super_hedging_cost_estimate,
    weak_duality_audit,
)
from levydual.market_model import (
    FiniteAtoms,
    LevyMarketSpec,
    Multiplicative,
    PiecewiseConstant,
    Strategy,
    admissible_bounds,
    simulate_paths,
)
from levydual.tree_oracle import (
    TreeMarket,
    build_tree,
    check_dominance,
    solve_dual_exact,
    solve_primal_exact,
    super_hedge_exact,
)
from levydual.utility import (
    CallableLoss,
    CallClaim,
    PowerLoss,
    PutClaim,
    QuadraticLoss,
    make_shortfall_utility,
)


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n[acceptance {number}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def unit_quadratic():
    return make_shortfall_utility(QuadraticLoss(), 1.0)


def test_criterion_1_tree_strong_duality(capsys, fixtures_dir, unit_quadratic):
    tree = TreeMarket.from_json((fixtures_dir / "binomial.json").read_text())
    start = time.perf_counter()
    primal = solve_primal_exact(tree, unit_quadratic, 0.5)
    dual = solve_dual_exact(tree, unit_quadratic, 0.5, primal)
    elapsed = time.perf_counter() - start
    ok = (abs(primal.u - 0.775) <= 1e-6 and abs(dual.y - 0.9) <= 1e-6
          and abs(dual.bound - 0.775) <= 1e-6 and dual.gap <= 1e-6 and elapsed < 1.0)
    report(capsys, 1, ok, f"u={primal.u:.12f} y={dual.y:.12f} bound={dual.bound:.12f} "
                          f"gap={dual.gap:.2e} time={elapsed:.2f}s")


def test_criterion_2_monte_carlo_closed_form(capsys, unit_quadratic):
    spec = LevyMarketSpec(b=0.0, sigma=0.2)
    start = time.perf_counter()
    ens = simulate_paths(spec, 50, 100_000, seed=2024)
    res = outer_minimize(spec, unit_quadratic, 0.5, ens)
    elapsed = time.perf_counter() - start
    # xi = 1 on every path, so the standard error is exactly zero; allow rounding
    budget_band = max(3 * res.budget_se, 1e-12)
    ok = (0.96 <= res.y_star <= 1.04 and 0.74 <= res.primal_bound <= 0.76
          and res.budget_residual <= budget_band and elapsed < 120)
    report(capsys, 2, ok, f"y_star={res.y_star:.8f} primal_bound={res.primal_bound:.8f} "
                          f"budget_residual={res.budget_residual:.2e} (band {budget_band:.1e}) "
                          f"time={elapsed:.1f}s")


def test_criterion_3_super_hedging(capsys, fixtures_dir):
    call = CallClaim(1.0)
    results = []
    for name, target in (("binomial", 1 / 15), ("trinomial", 1 / 12)):
        tree = TreeMarket.from_json((fixtures_dir / f"{name}.json").read_text())
        hedge = super_hedge_exact(tree, call)
        results.append((name, hedge.cost, abs(hedge.cost - target), check_dominance(tree, hedge, call)))
    ok = all(err <= 1e-10 and dom for _, _, err, dom in results)
    report(capsys, 3, ok, "; ".join(f"{n} cost={c:.15f} err={e:.1e} dominance={d}"
                                    for n, c, e, d in results))


def _random_feasible_element(spec, ens, basis, rng):
    nb, k = basis.n_buckets, spec.n_atoms
    # |G| stays well below 1 / (4 sqrt(dt)) so Euler step factors remain positive
    g = np.column_stack([rng.uniform(-0.5, 0.5, nb), rng.uniform(-0.1, 0.1, nb)])
    f = np.stack([rng.uniform(-0.6, 0.6, (nb, k)), rng.uniform(-0.05, 0.05, (nb, k))], axis=-1)
    trial = DualElement(basis, g, f, np.zeros((nb, 2)), 1.0)
    t = np.broadcast_to(ens.times[:-1], (ens.n_paths, ens.n_steps))
    x = ens.log_s[:, :-1]
    from levydual.dual_domain import hat_h
    need = hat_h(spec, trial, t, x)
    kb = basis.bucket(ens.times[:-1])
    a = np.zeros((nb, 2))
    for j in range(nb):
        a[j, 0] = need[:, kb == j].max() + rng.uniform(0.05, 0.5)
    return DualElement(basis, g, f, a, rng.uniform(0.5, 1.0))


def test_criterion_4_weak_duality(capsys):
    spec = LevyMarketSpec(b=0.05, sigma=0.2, jumps=FiniteAtoms((-0.3, 0.4), (0.3, 0.3)))
    ens = simulate_paths(spec, 20, 4000, seed=17)
    u = make_shortfall_utility(QuadraticLoss(), PutClaim(1.1))
    basis = ControlBasis.uniform(spec.T, 2)
    lo, hi = admissible_bounds(spec, 0.0)
    rng = np.random.default_rng(404)
    violations, worst, redraws = 0, -np.inf, 0
    for _ in range(50):
        d = _random_feasible_element(spec, ens, basis, rng)
        assert feasibility_check(spec, d, ens).feasible
        y, z = rng.uniform(0.0, 3.0), rng.uniform(0.05, 0.5)
        while True:
            beta = rng.uniform(lo / 2, hi / 2)  # inner half: boundary betas can hit zero wealth on a grid
            row = weak_duality_audit(spec, u, z, [Strategy.constant(beta)], d, y, ens)[0]
            if row.admissible:
                break
            redraws += 1
        violations += row.violation
        worst = max(worst, (row.primal - row.bound) / row.pooled_se if row.pooled_se > 0 else -np.inf)
    ok = violations == 0
    report(capsys, 4, ok, f"50 trials, violations={violations}, largest primal-bound excess "
                          f"{worst:.2f} pooled SE, inadmissible draws replaced={redraws}")


def test_criterion_5_dual_value_function(capsys, unit_quadratic):
    spec = LevyMarketSpec(b=0.05, sigma=0.2, jumps=FiniteAtoms((-0.3, 0.4), (0.3, 0.3)))
    ens = simulate_paths(spec, 20, 20_000, seed=99)
    u = unit_quadratic
    ys = np.array([0.01, 0.02, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 2.5, 3.0])
    vals, ses = [], []
    elem = None
    for i, y in enumerate(ys):
        if i == 0:
            elem, (v, se) = dual_value(spec, u, y, ens)
        else:
            elem, (v, se) = dual_value(spec, u, y, ens, elem, restarts=1, iters=60)
        vals.append(v)
        ses.append(se)
    vals, ses = np.array(vals), np.array(ses)
    w_hat, w_se, _ = super_hedging_cost_estimate(spec, u, ens)
    eu0, euH = 0.0, 1.0  # U(0) = 0 and U(H) = 1 on every path
    band = 3 * ses
    checks = {}
    checks["monotone"] = bool(np.all(vals[1:] <= vals[:-1] + band[1:] + band[:-1]))
    sec = []
    for i in range(1, len(ys) - 1):
        lam = (ys[i + 1] - ys[i]) / (ys[i + 1] - ys[i - 1])
        sec.append(vals[i] - (lam * vals[i - 1] + (1 - lam) * vals[i + 1])
                   <= band[i] + band[i - 1] + band[i + 1])
    checks["convex"] = bool(all(sec))
    checks["bounded"] = bool(np.all((vals >= eu0 - band) & (vals <= euH + band)))
    slopes = np.abs(np.diff(np.concatenate([[euH], vals]))) / np.diff(np.concatenate([[0.0], ys]))
    slope_band = 3 * (np.concatenate([[ses[0]], ses[1:] + ses[:-1]]) / np.diff(np.concatenate([[0.0], ys])))
    checks["lipschitz"] = bool(np.all(slopes <= w_hat + 3 * w_se + slope_band))
    small = (euH - vals[0]) / ys[0]
    checks["small_y_slope"] = bool(abs(small - w_hat) <= 3 * (w_se + ses[0] / ys[0]))
    ok = all(checks.values())
    report(capsys, 5, ok, f"{checks}; w_hat={w_hat:.4f}±{w_se:.4f}, slope(0.01)={small:.4f}, "
                          f"v(3)={vals[-1]:.2e}")


def _brute_hat_h(spec, t, h):
    """max over beta in the admissible interval of beta h, with 0 * inf = 0."""
    out = np.zeros(h.shape)
    for idx in np.ndindex(h.shape):
        lo, hi = admissible_bounds(spec, float(t[idx]))
        best = 0.0
        for end in (lo, hi):
            if h[idx] == 0.0:
                continue
            best = max(best, end * h[idx])
        out[idx] = best
    return out


def test_criterion_6_feasibility_machinery(capsys):
    atoms_spec = LevyMarketSpec(b=0.05, sigma=0.2, jumps=FiniteAtoms((-0.3, 0.4), (0.3, 0.3)))
    mult_spec = LevyMarketSpec(b=PiecewiseConstant((0.0, 0.5), (0.05, -0.03)), sigma=0.15,
                               jumps=Multiplicative(PiecewiseConstant((0.0, 0.5), (1.0, -0.5)),
                                                    (-0.3, 0.4), (1.0, 2.0), (0.3, 0.3)))
    rng = np.random.default_rng(606)
    disagreements, infeasible, lift_drift, dominance_fail, checked = 0, 0, 0.0, 0, 0
    for spec in (atoms_spec, mult_spec):
        small = simulate_paths(spec, 10, 200, seed=6)
        big = simulate_paths(spec, 20, 10_000, seed=66)
        basis = ControlBasis.for_spec(spec, 2)
        nb, k = basis.n_buckets, spec.n_atoms
        t_small = np.broadcast_to(small.times[:-1], (small.n_paths, small.n_steps))
        for _ in range(50):
            g = np.column_stack([rng.uniform(-0.5, 0.5, nb), rng.uniform(-0.1, 0.1, nb)])
            f = np.stack([rng.uniform(-0.6, 0.6, (nb, k)), rng.uniform(-0.05, 0.05, (nb, k))], -1)
            a = np.column_stack([rng.uniform(0.0, 1.0, nb), np.zeros(nb)])
            d = DualElement(basis, g, f, a, 1.0)
            # brute force: drift from the raw formula, interval from the strategy constraint
            G, F, A = d.raw_controls(t_small, small.log_s[:, :-1])
            v = np.stack([spec.v(s) for s in small.times[:-1]])[None, :, :]
            h = spec.b(t_small) + spec.sigma(t_small) * G + np.sum(spec.intensities * v * F, -1)
            hh = _brute_hat_h(spec, t_small, h)
            brute = bool(np.all(hh - A <= FEASIBILITY_TOL) and np.all(F >= -1.0))
            rep = feasibility_check(spec, d, small)
            disagreements += rep.feasible != brute
            disagreements += not np.isclose(rep.max_violation, max(float(np.max(hh - A)), 0.0),
                                            rtol=1e-9, atol=1e-12)
            if not rep.feasible:
                infeasible += 1
                continue
            lifted = martingale_lift(spec, d)
            t_big = np.broadcast_to(big.times[:-1], (big.n_paths, big.n_steps))
            lift_drift = max(lift_drift, float(np.max(np.abs(drift_h(spec, lifted, t_big, big.log_s[:, :-1])))))
            if not feasibility_check(spec, d, big).feasible:
                continue
            xi = stochastic_exponential(big, d)
            xl = stochastic_exponential(big, lifted)
            dominance_fail += int(np.any(xl < xi * (1 - 1e-12)))
            checked += 1
    ok = disagreements == 0 and lift_drift <= 1e-12 and dominance_fail == 0 and checked > 0
    report(capsys, 6, ok, f"100 elements ({infeasible} infeasible), disagreements={disagreements}, "
                          f"max |lifted drift|={lift_drift:.1e}, dominance checked on {checked} "
                          f"feasible elements x 1e4 paths, failures={dominance_fail}")


def test_criterion_7_utility_layer(capsys):
    losses = [QuadraticLoss(), PowerLoss(1.5), PowerLoss(3.0),
              CallableLoss(lambda x: np.expm1(x) if np.ndim(x) else float(np.expm1(x)))]
    rng = np.random.default_rng(707)
    failures = {"fenchel": 0, "derivative": 0, "flat": 0, "convexity": 0, "range": 0}
    for n in range(1000):
        loss = losses[n % len(losses)]
        u = make_shortfall_utility(loss, PutClaim(1.2))
        s = rng.uniform(0.2, 1.6)  # the path enters through S_T and hence H
        h = float(u.cap(np.array([s]))[0])
        y = rng.uniform(0.01, 5.0)
        z = rng.uniform(0.0, 1.0) * h
        dual = float(u.dual(y, h))
        if float(u.value(z, h)) > dual + y * z + 1e-12:
            failures["fenchel"] += 1
        step = 1e-4 * max(1.0, y)
        fd = (float(u.dual(y + step, h)) - float(u.dual(y - step, h))) / (2 * step)
        if abs(fd + min(float(u.inverse(y, h)), h)) > 10 * step:
            failures["derivative"] += 1
        w = h + rng.uniform(0.0, 2.0)
        if float(u.value(w, h)) != float(u.value(h, h)):
            failures["flat"] += 1
        y1, y2 = sorted(rng.uniform(0.01, 5.0, 2))
        lam = rng.uniform()
        mid = float(u.dual(lam * y1 + (1 - lam) * y2, h))
        if mid > lam * float(u.dual(y1, h)) + (1 - lam) * float(u.dual(y2, h)) + 1e-12:
            failures["convexity"] += 1
        u0, uz, uh = (float(u.value(q, h)) for q in (0.0, z, h))
        if not (u0 <= uz <= uh and float(u.dual(y2, h)) <= float(u.dual(y1, h))):
            failures["range"] += 1
    ok = not any(failures.values())
    report(capsys, 7, ok, f"1000 random (y, path, z) triples over quadratic, power(1.5), power(3) "
                          f"and a callable loss, convexity and range included; failures={failures}")


def test_criterion_8_tree_vs_monte_carlo(capsys, unit_quadratic):
    spec = LevyMarketSpec(b=0.0, sigma=0.2, jumps=FiniteAtoms((0.5,), (0.5,)))
    start = time.perf_counter()
    tree_u = solve_primal_exact(build_tree(spec, 20), unit_quadratic, 0.5).u
    ens = simulate_paths(spec, 20, 20_000, seed=88)
    res = outer_minimize(spec, unit_quadratic, 0.5, ens)
    elapsed = time.perf_counter() - start
    diff = abs(res.primal_bound - tree_u)
    allowed = 3 * res.v_se + 0.01
    ok = diff <= allowed and elapsed < 300
    report(capsys, 8, ok, f"tree u(0.5)={tree_u:.6f}, MC primal_bound={res.primal_bound:.6f} "
                          f"(se {res.v_se:.1e}), |diff|={diff:.2e} <= {allowed:.3e}, time={elapsed:.1f}s")
