"""Sample-average dual solver.

The dual value ``v(y) = inf_xi E[Utilde(y xi_T)]`` is estimated on a fixed
path ensemble (common random numbers across every y and every parameter
vector).  The search runs over local-martingale deflators (a = 0, zero
drift), which dominate their non-lifted counterparts pathwise, so nothing
is lost for a non-increasing ``Utilde``.  The outer problem
``min_y v(y) + z y`` is solved by golden-section search.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import quadprog

from .dual_domain import ControlBasis, DualElement, risk_neutral_density, stochastic_exponential
from .errors import DomainError, InadmissibleStrategyError, NumericalFailure, ValidationError
from .market_model import LevyMarketSpec, PathEnsemble, Strategy, admissible_bounds, wealth_paths
from .utility import StateUtility

__all__ = [
    "SearchSpace",
    "DualSolveResult",
    "AuditRow",
    "dual_value",
    "outer_minimize",
    "candidate_wealth",
    "budget_residual",
    "weak_duality_audit",
    "super_hedging_cost_estimate",
    "EPS_F",
]

log = logging.getLogger(__name__)

EPS_F = 1e-6
_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    n = x.size
    mean = float(np.mean(x))
    se = float(np.std(x, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return mean, se


class SearchSpace:
    """Local-martingale deflators on a control basis, evaluated on one ensemble.

    The free parameters are the jump controls ``f`` (n_buckets, n_atoms, 2).
    Where sigma > 0 the diffusion control is eliminated through the zero-drift
    equation ``G = -(b + sum_i lambda_i v_i F_i) / sigma``; where sigma = 0,
    G = 0 and ``sum_i lambda_i v_i F_i = -b`` is kept as a linear constraint.
    Coefficients are frozen at bucket start times.
    """

    def __init__(self, spec: LevyMarketSpec, ensemble: PathEnsemble,
                 basis: ControlBasis | None = None, eps_F: float = EPS_F):
        self.spec = spec
        self.ensemble = ensemble
        self.basis = basis or ControlBasis.for_spec(spec)
        self.eps_F = eps_F
        nb, k = self.basis.n_buckets, spec.n_atoms
        self.nb, self.k = nb, k
        t = ensemble.times[:-1]
        self.step_bucket = self.basis.bucket(t)
        starts = self.basis.starts
        self.b = np.array([spec.b(s) for s in starts])
        self.sigma = np.array([spec.sigma(s) for s in starts])
        self.v = np.stack([spec.v(s) for s in starts]) if k else np.zeros((nb, 0))
        self.lam = spec.intensities
        self.w = self.lam * self.v  # (nb, k) weights of F in the drift
        self.diffusive = self.sigma > 0
        for j in np.flatnonzero(~self.diffusive):
            if self.b[j] != 0.0 and not np.any(self.w[j] != 0.0):
                raise ValidationError(f"bucket {j}: drift without diffusion or jumps cannot be removed")

        self.dt = ensemble.dt
        x = ensemble.log_s[:, :-1]
        kb = self.step_bucket
        sig = self.sigma[kb]
        inv_sig = np.where(sig > 0, 1.0 / np.where(sig > 0, sig, 1.0), 0.0)
        self.x = x
        self.P = ensemble.n_paths
        self.alpha = 1.0 - (self.b[kb] * inv_sig)[None, :] * ensemble.dW
        self.dWs = ensemble.dW * inv_sig[None, :]  # dW / sigma, zero where sigma = 0
        # jumps are sparse: keep (path, step, atom, count) of every event
        pe, ke, ie = np.nonzero(ensemble.jump_counts)
        self.ev_path, self.ev_atom = pe, ie
        self.ev_bucket = kb[ke]
        self.ev_count = ensemble.jump_counts[pe, ke, ie].astype(float)
        self.ev_x = x[pe, ke]
        self.xmin = np.empty(nb)
        self.xmax = np.empty(nb)
        for j in range(nb):
            cols = kb == j
            self.xmin[j] = x[:, cols].min() if cols.any() else 0.0
            self.xmax[j] = x[:, cols].max() if cols.any() else 0.0

    @property
    def n_params(self) -> int:
        return self.nb * self.k * 2

    # -- parameters <-> elements ---------------------------------------
    def theta_from_element(self, d: DualElement | None) -> np.ndarray:
        if d is None or d.basis != self.basis or d.n_atoms != self.k or d.lift is not None:
            d = risk_neutral_density(self.spec, self.basis)
        return self.project(np.array(d.f, dtype=float))

    def element(self, theta) -> DualElement:
        f = np.asarray(theta, dtype=float).reshape(self.nb, self.k, 2)
        g = np.zeros((self.nb, 2))
        for j in np.flatnonzero(self.diffusive):
            g[j, 0] = -(self.b[j] + self.w[j] @ f[j, :, 0]) / self.sigma[j]
            g[j, 1] = -(self.w[j] @ f[j, :, 1]) / self.sigma[j]
        return DualElement(self.basis, g, f, np.zeros((self.nb, 2)), 1.0)

    def _f(self, theta):
        return np.asarray(theta, dtype=float).reshape(self.nb, self.k, 2)

    # -- evaluation ------------------------------------------------------
    def log_xi_T(self, theta, with_grad: bool = False):
        """``log xi_T`` per path, or ``None`` if a step factor is non-positive.

        With ``with_grad`` a pair ``(log xi_T, cache)`` is returned; the cache
        feeds :meth:`grad`.
        """
        if self.k == 0:
            cont = self.alpha
            onep = np.ones(0)
            if np.any(cont <= 0):
                return (None, None) if with_grad else None
            lx = np.sum(np.log(cont), axis=1)
            return (lx, (cont, onep)) if with_grad else lx
        f = self._f(theta)
        kb = self.step_bucket
        # sum_i F_i c_i = dt sum_i lambda_i F_i + (dW / sigma) sum_i w_i F_i, F affine in x
        lam_f = f.transpose(0, 2, 1) @ self.lam  # (nb, 2)
        w_f = np.einsum("bk,bkj->bj", self.w, f)
        cont = (self.alpha
                - self.dt * (lam_f[kb, 0] + lam_f[kb, 1] * self.x)
                - self.dWs * (w_f[kb, 0] + w_f[kb, 1] * self.x))
        onep = 1.0 + f[self.ev_bucket, self.ev_atom, 0] + f[self.ev_bucket, self.ev_atom, 1] * self.ev_x
        if np.any(cont <= 0) or np.any(onep <= 0):
            return (None, None) if with_grad else None
        lx = np.sum(np.log(cont), axis=1)
        lx += np.bincount(self.ev_path, self.ev_count * np.log(onep), minlength=self.P)
        return (lx, (cont, onep)) if with_grad else lx

    def grad(self, weights, cache) -> np.ndarray:
        """Gradient of ``mean(weights * log xi_T)`` in the flat parameter vector."""
        if self.k == 0:
            return np.zeros(0)
        cont, onep = cache
        kb, nb = self.step_bucket, self.nb
        R = weights[:, None] / cont
        Rx = R * self.x

        def per_bucket(col):
            return np.bincount(kb, col, minlength=nb)

        s0, sx = per_bucket(R.sum(0)), per_bucket(Rx.sum(0))
        sd, sdx = per_bucket((R * self.dWs).sum(0)), per_bucket((Rx * self.dWs).sum(0))
        lam_dt = self.lam * self.dt
        g0 = -(s0[:, None] * lam_dt[None, :] + sd[:, None] * self.w)
        g1 = -(sx[:, None] * lam_dt[None, :] + sdx[:, None] * self.w)
        jump = weights[self.ev_path] * self.ev_count / onep
        flat = self.ev_bucket * self.k + self.ev_atom
        g0 += np.bincount(flat, jump, minlength=nb * self.k).reshape(nb, self.k)
        g1 += np.bincount(flat, jump * self.ev_x, minlength=nb * self.k).reshape(nb, self.k)
        return np.stack([g0, g1], axis=-1).ravel() / self.P

    # -- projection ------------------------------------------------------
    def project(self, theta) -> np.ndarray:
        f = np.array(theta, dtype=float).reshape(self.nb, self.k, 2)
        floor = -1.0 + self.eps_F
        for j in range(self.nb):
            lo, hi = self.xmin[j], self.xmax[j]
            if self.diffusive[j]:
                for i in range(self.k):
                    f[j, i] = _project_two_halfplanes(f[j, i], lo, hi, floor)
            else:
                f[j] = self._project_equality_bucket(f[j], j, lo, hi, floor)
        return f.ravel()

    def _project_equality_bucket(self, fj, j, lo, hi, floor):
        """Project onto the floor constraints intersected with the zero-drift plane.

        A small dense QP in 2k unknowns; a dual active-set solver returns it
        exactly, so both the plane and the floor hold to rounding.
        """
        k = self.k
        xs = (lo,) if lo == hi else (lo, hi)
        eq = np.zeros((2, 2 * k))
        eq[0, 0::2] = self.w[j]
        eq[1, 1::2] = self.w[j]
        ineq = np.zeros((k * len(xs), 2 * k))
        for i in range(k):
            for r, x in enumerate(xs):
                ineq[i * len(xs) + r, 2 * i:2 * i + 2] = (1.0, x)
        C = np.vstack([eq, ineq])
        rhs = np.concatenate([[-self.b[j], 0.0], np.full(len(ineq), floor)])
        try:
            sol = quadprog.solve_qp(np.eye(2 * k), np.asarray(fj, float).ravel(), C.T, rhs, meq=2)[0]
        except ValueError as exc:
            raise NumericalFailure(f"bucket {j}: no jump control meets the floor and removes the drift") from exc
        return sol.reshape(k, 2)


def _project_two_halfplanes(u, lo, hi, floor):
    """Project (f0, f1) onto ``{f0 + f1 x >= floor for x in {lo, hi}}``."""
    u = np.asarray(u, dtype=float)
    normals = [np.array([1.0, lo])] if lo == hi else [np.array([1.0, lo]), np.array([1.0, hi])]
    # rounding on a line of size |u| must not push a face point into the corner branch
    tol = 1e-13 * (1.0 + float(np.max(np.abs(u))) * (1.0 + max(abs(lo), abs(hi))))
    if all(n @ u >= floor for n in normals):
        return u
    best, best_d = None, np.inf
    for i, n in enumerate(normals):
        gap = floor - n @ u
        if gap <= 0:
            continue
        p = u + gap * n / (n @ n)
        if all(m @ p >= floor - tol for j, m in enumerate(normals) if j != i):
            d = float(np.sum((p - u) ** 2))
            if d < best_d:
                best, best_d = p, d
    if len(normals) == 2:
        # corner: both constraints active -> F = floor across the interval
        corner = np.array([floor, 0.0])
        if float(np.sum((corner - u) ** 2)) < best_d:
            best = corner
    return best


def _projected_descent(fun, theta0, project, iters, step0, max_retries=30, gtol=1e-12):
    """Projected gradient with normalized steps ``c / sqrt(iter)``; returns the best iterate.

    ``fun(theta)`` returns ``(value, grad)`` or ``(None, None)`` when the
    parameter produces a non-positive deflator factor.
    """
    theta = project(theta0)
    val, grad = fun(theta)
    c = step0
    retries = 0
    while val is None:
        # shrink toward the risk-neutral start until the deflator is valid
        retries += 1
        if retries > max_retries:
            raise NumericalFailure("no valid starting point for the dual search")
        theta = project(0.5 * theta)
        val, grad = fun(theta)
    best_val, best_theta = val, theta
    for it in range(1, iters + 1):
        gn = float(np.linalg.norm(grad))
        if gn < gtol:
            break
        tries = 0
        while True:
            trial = project(theta - (c / np.sqrt(it)) * grad / gn)
            tv, tg = fun(trial)
            if tv is not None and np.isfinite(tv):
                break
            c *= 0.5
            tries += 1
            if tries > max_retries:
                break
        if tries > max_retries:
            # pinned against the edge of the positive-step-factor region
            break
        theta, val, grad = trial, tv, tg
        if val < best_val:
            best_val, best_theta = val, theta
    return best_theta, best_val


class _DualProblem:
    """Caches the ensemble-dependent pieces shared by all y."""

    def __init__(self, spec, u, ensemble, basis=None):
        self.spec, self.u, self.ensemble = spec, u, ensemble
        self.space = SearchSpace(spec, ensemble, basis)
        self.h = u.cap(ensemble.S_T)
        self.pool: list[tuple[np.ndarray, np.ndarray]] = []  # (theta, xi_T)

    def objective(self, y):
        u, h, space = self.u, self.h, self.space

        def fun(theta):
            lx, cache = space.log_xi_T(theta, with_grad=True)
            if lx is None:
                return None, None
            xi = np.exp(lx)
            val = float(np.mean(u.dual(y * xi, h)))
            weights = -u.inverse(y * xi, h) * y * xi
            return val, space.grad(weights, cache)

        return fun

    def xi_T(self, theta):
        lx = self.space.log_xi_T(theta)
        if lx is None:
            raise NumericalFailure("deflator factor became non-positive")
        return np.exp(lx)

    def remember(self, theta):
        for th, _ in self.pool:
            if np.array_equal(th, theta):
                return
        self.pool.append((theta, self.xi_T(theta)))

    def best_in_pool(self, y):
        vals = [float(np.mean(self.u.dual(y * xi, self.h))) for _, xi in self.pool]
        i = int(np.argmin(vals))
        return self.pool[i][0], vals[i]

    def solve(self, y, theta0, restarts, iters, step0, seed):
        space = self.space
        if space.n_params == 0:
            theta = np.zeros(0)
            self.remember(theta)
            return theta
        fun = self.objective(y)
        rng = np.random.default_rng([int(seed) % (1 << 63), 0xD0A1])
        starts = [theta0] + [theta0 + 0.1 * rng.standard_normal(theta0.shape) for _ in range(restarts - 1)]
        best_theta, best_val = None, np.inf
        for s in starts:
            th, val = _projected_descent(fun, s, space.project, iters, step0)
            if val < best_val:
                best_theta, best_val = th, val
        self.remember(best_theta)
        return best_theta

    def value(self, y, theta):
        xi = self.xi_T(theta)
        return _mean_se(self.u.dual(y * xi, self.h))


def dual_value(spec: LevyMarketSpec, u: StateUtility, y: float, ensemble: PathEnsemble,
               init: DualElement | None = None, *, basis: ControlBasis | None = None,
               restarts: int = 5, iters: int = 100, step0: float = 0.25,
               _problem: _DualProblem | None = None):
    """Minimize the sample mean of ``Utilde(y xi_T)`` over the search space.

    Returns ``(element, (estimate, standard_error))``.  ``y = 0`` returns the
    boundary value ``mean U(H)`` without optimizing.
    """
    if y < 0:
        raise ValidationError("y must be non-negative")
    prob = _problem or _DualProblem(spec, u, ensemble, basis)
    theta0 = prob.space.theta_from_element(init)
    if y == 0:
        return prob.space.element(theta0), _mean_se(u.value(prob.h, prob.h))
    theta = prob.solve(y, theta0, restarts, iters, step0, ensemble.seed)
    return prob.space.element(theta), prob.value(y, theta)


def super_hedging_cost_estimate(spec: LevyMarketSpec, u: StateUtility, ensemble: PathEnsemble,
                                restarts: int = 5, *, basis: ControlBasis | None = None,
                                iters: int = 100, step0: float = 0.25):
    """Lower estimate of ``w_Gamma = sup E[xi_T H]`` by multi-start projected ascent.

    Returns ``(estimate, standard_error, element)``.
    """
    space = SearchSpace(spec, ensemble, basis)
    h = u.cap(ensemble.S_T)
    theta0 = space.theta_from_element(None)

    def fun(theta):
        lx, cache = space.log_xi_T(theta, with_grad=True)
        if lx is None:
            return None, None
        xi = np.exp(lx)
        return -float(np.mean(xi * h)), space.grad(-h * xi, cache)

    if space.n_params == 0:
        best = theta0
    else:
        rng = np.random.default_rng([int(ensemble.seed) % (1 << 63), 0x5E0])
        best, best_val = theta0, fun(theta0)[0]
        for r in range(restarts):
            s = theta0 if r == 0 else theta0 + 0.1 * rng.standard_normal(theta0.shape)
            th, val = _projected_descent(fun, s, space.project, iters, step0)
            if val < best_val:
                best, best_val = th, val
    xi = np.exp(space.log_xi_T(best))
    est, se = _mean_se(xi * h)
    return est, se, space.element(best)


def candidate_wealth(u: StateUtility, y_star: float, xi_T, h) -> np.ndarray:
    """``V* = I(y* xi*_T) ^ H`` pathwise."""
    if not y_star > 0:
        raise ValidationError("y_star must be positive")
    return u.inverse(y_star * np.asarray(xi_T, dtype=float), h)


def budget_residual(V, xi_T, z: float) -> tuple[float, float]:
    """``|mean(V xi_T) - z|`` and the standard error of ``mean(V xi_T)``."""
    m, se = _mean_se(np.asarray(V, float) * np.asarray(xi_T, float))
    return abs(m - z), se


@dataclass
class DualSolveResult:
    z: float
    y_star: float
    d_star: DualElement
    v_value: float
    v_se: float
    budget_residual: float
    budget_se: float
    wealth: np.ndarray = field(repr=False)
    xi_T: np.ndarray = field(repr=False)
    primal_bound: float
    w_hat: float
    w_hat_se: float
    trace: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "z": self.z,
            "y_star": self.y_star,
            "v_value": self.v_value,
            "v_se": self.v_se,
            "primal_bound": self.primal_bound,
            "budget_residual": self.budget_residual,
            "budget_se": self.budget_se,
            "w_hat": self.w_hat,
            "w_hat_se": self.w_hat_se,
            "dual_element": self.d_star.to_dict(),
        }


def _golden_section(f, lo, hi, xtol, maxiter=200):
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(maxiter):
        if b - a <= xtol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def outer_minimize(spec: LevyMarketSpec, u: StateUtility, z: float, ensemble: PathEnsemble, *,
                   basis: ControlBasis | None = None, restarts: int = 5, iters: int = 100,
                   warm_iters: int = 40, step0: float = 0.25, w_hat: float | None = None,
                   y_tol: float = 1e-6) -> DualSolveResult:
    """Minimize ``f_z(y) = v(y) + z y`` and assemble the candidate optimum.

    Cold multi-start at the first y, warm single starts afterwards; every
    deflator found stays in a pool and each y uses the best pool member as
    well.  The final y is polished on the budget equation
    ``mean(xi* I(y xi*)) = z`` for the selected deflator.
    """
    z = float(z)
    if not z > 0:
        raise ValidationError("initial wealth z must be positive")
    prob = _DualProblem(spec, u, ensemble, basis)
    w_se = 0.0
    if w_hat is None:
        w_hat, w_se, _ = super_hedging_cost_estimate(spec, u, ensemble, restarts, basis=basis,
                                                     iters=iters, step0=step0)
    eu_h, _ = _mean_se(u.value(prob.h, prob.h))
    if z >= w_hat:
        raise DomainError(
            f"z={z:g} >= estimated super-hedging cost {w_hat:.6g}: the claim can be "
            f"super-hedged and u(z) = E[U(H)] = {eu_h:.6g}")
    eu_0, _ = _mean_se(u.value(np.zeros_like(prob.h), prob.h))

    theta0 = prob.space.theta_from_element(None)
    cache: dict[float, tuple[np.ndarray, float, float]] = {}
    state = {"cold": True, "theta": theta0}

    def v_hat(y):
        if y in cache:
            return cache[y]
        if y == 0.0:
            cache[y] = (state["theta"], eu_h, 0.0)
            return cache[y]
        if prob.pool:
            start, _ = prob.best_in_pool(y)
        else:
            start = state["theta"]
        if state["cold"]:
            theta = prob.solve(y, start, restarts, iters, step0, ensemble.seed)
            state["cold"] = False
        else:
            theta = prob.solve(y, start, 1, warm_iters, step0 * 0.5, ensemble.seed)
        theta, _ = prob.best_in_pool(y)
        val, se = prob.value(y, theta)
        cache[y] = (theta, val, se)
        return cache[y]

    y_max = 1.0
    for _ in range(60):
        _, val, se = v_hat(y_max)
        if val - eu_0 <= se:
            break
        y_max *= 2.0
    else:
        raise NumericalFailure("could not bracket the dual minimizer")

    f = lambda y: v_hat(y)[1] + z * y  # noqa: E731
    y_gs, _ = _golden_section(f, 0.0, y_max, y_tol * y_max)
    # best evaluated point, in case the objective is noisy
    y_best = min((y for y in cache if y > 0), key=lambda y: cache[y][1] + z * y, default=y_gs)
    theta_star = cache[y_best][0]
    xi = prob.xi_T(theta_star)
    y_star = _polish_budget(u, xi, prob.h, z, y_best, y_max)

    v_val, v_se = _mean_se(u.dual(y_star * xi, prob.h))
    V = candidate_wealth(u, y_star, xi, prob.h)
    resid, resid_se = budget_residual(V, xi, z)
    trace = sorted((y, cache[y][1], cache[y][2]) for y in cache)
    return DualSolveResult(
        z=z, y_star=float(y_star), d_star=prob.space.element(theta_star), v_value=v_val, v_se=v_se,
        budget_residual=resid, budget_se=resid_se, wealth=V, xi_T=xi,
        primal_bound=v_val + z * y_star, w_hat=float(w_hat), w_hat_se=float(w_se), trace=trace)


def _polish_budget(u, xi, h, z, y0, y_max):
    """Root of ``mean(xi I(y xi)) = z`` near ``y0``; keeps ``y0`` when unbracketed."""
    budget = lambda y: float(np.mean(xi * u.inverse(y * xi, h)))  # noqa: E731
    lo, hi = 0.0, max(2.0 * y_max, 2.0 * y0)
    if not (budget(lo) > z > budget(hi)):
        return y0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if budget(mid) > z:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 4 * np.finfo(float).eps * hi:
            break
    cand = (lo, hi)
    return min(cand, key=lambda y: abs(budget(y) - z))


@dataclass
class AuditRow:
    strategy: str
    admissible: bool
    reason: str
    primal: float = float("nan")
    primal_se: float = float("nan")
    bound: float = float("nan")
    bound_se: float = float("nan")
    gap: float = float("nan")
    pooled_se: float = float("nan")
    violation: bool = False

    def as_row(self) -> list:
        return [self.strategy, self.admissible, self.reason, self.primal, self.primal_se,
                self.bound, self.bound_se, self.gap, self.pooled_se, self.violation]

    header = ["strategy", "admissible", "reason", "primal", "primal_se", "bound", "bound_se",
              "gap", "pooled_se", "violation"]


def weak_duality_audit(spec: LevyMarketSpec, u: StateUtility, z: float, strategies, d: DualElement,
                       y: float, ensemble: PathEnsemble) -> list[AuditRow]:
    """Compare ``mean U(V^{z,beta}_T)`` with ``mean Utilde(y xi_T) + z y`` on shared paths.

    A violation is flagged when the paired difference exceeds three pooled
    standard errors.  Strategies leaving the admissible interval or driving
    wealth negative are excluded with a reason.
    """
    if not y > 0:
        raise ValidationError("y must be positive")
    xi = stochastic_exponential(ensemble, d)[:, -1]
    h = u.cap(ensemble.S_T)
    dual_terms = u.dual(y * xi, h)
    bound, bound_se = _mean_se(dual_terms)
    bound += z * y
    rows = []
    times = ensemble.times[:-1]
    for s in strategies:
        label = s.label if isinstance(s, Strategy) else str(s)
        beta = s.values(np.broadcast_to(times, ensemble.S[:, :-1].shape), ensemble.log_s[:, :-1])
        outside = False
        for k, t in enumerate(times):
            lo, hi = admissible_bounds(spec, t)
            if np.any(beta[:, k] < lo) or np.any(beta[:, k] > hi):
                outside = True
                break
        if outside:
            rows.append(AuditRow(label, False, "outside the admissible interval"))
            continue
        try:
            V = wealth_paths(ensemble, s, z)[:, -1]
        except InadmissibleStrategyError as exc:
            rows.append(AuditRow(label, False, str(exc)))
            continue
        util = u.value(V, h)
        primal, primal_se = _mean_se(util)
        diff = util - dual_terms - z * y
        gap_mean, pooled = _mean_se(diff)
        violation = gap_mean > 3.0 * pooled + 1e-12
        rows.append(AuditRow(label, True, "", primal, primal_se, bound, bound_se,
                             bound - primal, pooled, bool(violation)))
    return rows
