"""Exact oracle on recombining finite trees.

Every level repeats one branch list ``(p_j, r_j)``; a node is identified by
how many times each branch has been taken, so the price at a node is
``s0 * prod_j r_j ** n_j`` and the lattice has polynomially many nodes.
Claims and terminal wealth profiles are functions of the terminal node.

Three exact computations are provided:

* super-hedging by backward recursion over the vertices of each node's
  one-step risk-neutral polytope, with the hedge read off the active pair;
* the primal shortfall problem as a convex program in the terminal profile
  and the node values of its super-hedging price;
* its Lagrange dual, written in scaled measure flows ``m`` (``m_root <= y``,
  leaks allowed at every node so that supermartingale deflators are included).

The two programs are solved by cvxpy; the reported gap certifies the pair.
"""

from __future__ import annotations

import itertools
import json
import logging
import warnings
from dataclasses import dataclass, field
from math import comb

import numpy as np

from .errors import ArbitrageError, DomainError, NumericalFailure, UnsupportedStructureError, ValidationError
from .market_model import LevyMarketSpec
from .utility import StateUtility

log = logging.getLogger(__name__)

__all__ = [
    "TreeMarket",
    "build_tree",
    "risk_neutral_vertices",
    "super_hedge_exact",
    "check_dominance",
    "solve_primal_exact",
    "solve_dual_exact",
    "tree_dual_value",
    "HedgeResult",
    "PrimalResult",
    "DualResult",
]

MAX_DEPTH = 20
MAX_BRANCHES = 4


def risk_neutral_vertices(returns) -> np.ndarray:
    """Vertices of ``{q >= 0: sum q = 1, sum q_j r_j = 1}`` (one row per vertex).

    Vertices are supported on a pair straddling 1 or on a single branch with
    ``r = 1``.
    """
    r = np.asarray(returns, dtype=float)
    m = r.size
    verts = []
    for j in range(m):
        if r[j] == 1.0:
            q = np.zeros(m)
            q[j] = 1.0
            verts.append(q)
    for j, l in itertools.product(range(m), range(m)):
        if r[j] > 1.0 > r[l]:
            q = np.zeros(m)
            q[j] = (1.0 - r[l]) / (r[j] - r[l])
            q[l] = 1.0 - q[j]
            verts.append(q)
    if not verts:
        raise ArbitrageError(f"returns {r.tolist()} lie on one side of 1: no risk-neutral measure")
    return np.array(verts)


@dataclass(frozen=True)
class TreeMarket:
    """Recombining tree with the same branch list ``(p_j, r_j)`` at every node."""

    depth: int
    probabilities: tuple
    returns: tuple
    s0: float = 1.0
    _levels: list = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        p = tuple(float(x) for x in self.probabilities)
        r = tuple(float(x) for x in self.returns)
        object.__setattr__(self, "probabilities", p)
        object.__setattr__(self, "returns", r)
        if int(self.depth) != self.depth or not 1 <= self.depth <= MAX_DEPTH:
            raise ValidationError(f"tree depth must be an integer in [1, {MAX_DEPTH}]")
        object.__setattr__(self, "depth", int(self.depth))
        if len(p) != len(r) or not 2 <= len(p) <= MAX_BRANCHES:
            raise ValidationError(f"a node needs between 2 and {MAX_BRANCHES} branches")
        if any(x <= 0 for x in p) or abs(sum(p) - 1.0) > 1e-12:
            raise ValidationError("branch probabilities must be positive and sum to 1")
        if any(x <= 0 for x in r):
            raise ValidationError("gross returns must be positive")
        if not min(r) <= 1.0 <= max(r):
            raise ArbitrageError(f"returns {list(r)} admit arbitrage")
        if not self.s0 > 0:
            raise ValidationError("s0 must be positive")
        object.__setattr__(self, "_levels", _lattice(self.depth, len(r)))

    # -- structure -------------------------------------------------------
    @property
    def n_branches(self) -> int:
        return len(self.returns)

    @property
    def vertices(self) -> np.ndarray:
        return risk_neutral_vertices(self.returns)

    def counts(self, level: int) -> np.ndarray:
        """Branch-count vectors of the nodes at ``level`` (rows)."""
        return self._levels[level][0]

    def children(self, level: int) -> np.ndarray:
        """Indices of the children of each node at ``level`` (one column per branch)."""
        return self._levels[level][1]

    def prices(self, level: int) -> np.ndarray:
        c = self.counts(level)
        return self.s0 * np.prod(np.asarray(self.returns)[None, :] ** c, axis=1)

    @property
    def terminal_prices(self) -> np.ndarray:
        return self.prices(self.depth)

    @property
    def terminal_probabilities(self) -> np.ndarray:
        return self.level_probabilities(self.depth)

    def level_probabilities(self, level: int) -> np.ndarray:
        """P(node) at ``level``: multinomial weights."""
        c = self.counts(level)
        p = np.asarray(self.probabilities)
        mult = np.array([_multinomial(row) for row in c], dtype=float)
        return mult * np.prod(p[None, :] ** c, axis=1)

    def n_nodes(self) -> int:
        return sum(len(self._levels[t][0]) for t in range(self.depth + 1))

    # -- JSON --------------------------------------------------------------
    def to_dict(self, include_nodes: bool = True) -> dict:
        out = {
            "depth": self.depth,
            "s0": self.s0,
            "branches": [{"probability": p, "return": r} for p, r in zip(self.probabilities, self.returns)],
        }
        if include_nodes:
            nodes = []
            for t in range(self.depth + 1):
                prices = self.prices(t)
                kids = self.children(t) if t < self.depth else None
                for i, c in enumerate(self.counts(t)):
                    node = {"level": t, "index": i, "counts": c.tolist(), "price": float(prices[i])}
                    if kids is not None:
                        node["children"] = kids[i].tolist()
                    nodes.append(node)
            out["nodes"] = nodes
        return out

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, data: dict) -> "TreeMarket":
        try:
            branches = data["branches"]
            p = [b["probability"] for b in branches]
            r = [b["return"] for b in branches]
            return cls(int(data["depth"]), tuple(p), tuple(r), float(data.get("s0", 1.0)))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed tree description: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "TreeMarket":
        return cls.from_dict(json.loads(text))


def _multinomial(counts) -> int:
    n, out = 0, 1
    for c in counts:
        n += int(c)
        out *= comb(n, int(c))
    return out


def _lattice(depth: int, m: int):
    """Per level: (counts array, children index array or None)."""
    levels = []
    index_maps = []
    for t in range(depth + 1):
        rows = [c for c in itertools.product(range(t + 1), repeat=m) if sum(c) == t]
        rows.sort(reverse=True)
        index_maps.append({c: i for i, c in enumerate(rows)})
        levels.append(np.array(rows, dtype=int).reshape(len(rows), m))
    out = []
    for t in range(depth + 1):
        kids = None
        if t < depth:
            kids = np.empty((len(levels[t]), m), dtype=int)
            for i, c in enumerate(levels[t]):
                for j in range(m):
                    nxt = list(c)
                    nxt[j] += 1
                    kids[i, j] = index_maps[t + 1][tuple(nxt)]
        out.append((levels[t], kids))
    return out


def build_tree(spec: LevyMarketSpec, n_steps: int) -> TreeMarket:
    """Moment-matched lattice: two diffusion branches plus one branch per atom.

    With ``Lambda = sum_i lambda_i dt`` the atoms carry probability
    ``lambda_i dt`` and return ``1 + v_i``; the diffusion branches share
    ``1 - Lambda`` and have returns ``1 + m +- s`` chosen so that each step
    has mean ``1 + b dt`` and diffusive variance ``sigma^2 dt``.  Without
    diffusion the two branches merge into one.
    """
    if spec.case != "atoms" or not spec.is_time_homogeneous:
        raise UnsupportedStructureError("trees need a time-homogeneous finite-atom specification")
    if int(n_steps) != n_steps or n_steps < 1:
        raise ValidationError("n_steps must be a positive integer")
    dt = spec.T / n_steps
    b, sigma = float(spec.b(0.0)), float(spec.sigma(0.0))
    v = spec.v(0.0)
    lam = spec.intensities
    big_lam = float(np.sum(lam) * dt)
    if big_lam >= 1.0:
        raise ValidationError(f"step {dt:g} too coarse: total jump probability {big_lam:g} >= 1")
    rest = 1.0 - big_lam
    m = (b * dt - dt * float(np.sum(lam * v))) / rest
    probs, rets = [], []
    if sigma > 0:
        s = sigma * np.sqrt(dt / rest)
        probs += [rest / 2, rest / 2]
        rets += [1.0 + m + s, 1.0 + m - s]
    else:
        probs.append(rest)
        rets.append(1.0 + m)
    probs += list(lam * dt)
    rets += list(1.0 + v)
    if min(rets) <= 0:
        raise ValidationError("a tree branch has a non-positive return; use more steps")
    return TreeMarket(int(n_steps), tuple(probs), tuple(rets), spec.s0)


# -- super-hedging ---------------------------------------------------------

@dataclass
class HedgeResult:
    cost: float
    values: list = field(repr=False)  # per level: super-hedging price at each node
    positions: list = field(repr=False)  # per level < depth: money held in the stock

    def to_dict(self) -> dict:
        return {"cost": self.cost,
                "values": [v.tolist() for v in self.values],
                "positions": [p.tolist() for p in self.positions]}


def _one_step(r, cj):
    """Super-hedging price and stock position for child values ``cj`` (one node).

    The price is the max of ``E_q[c]`` over polytope vertices; the position
    is the slope of the chord of the maximizing vertex, bumped up until every
    child is dominated in floating point.
    """
    best, best_phi = -np.inf, 0.0
    m = r.size
    for j in range(m):
        if r[j] == 1.0 and cj[j] > best:
            best, best_phi = cj[j], 0.0
    for j, l in itertools.product(range(m), range(m)):
        if r[j] > 1.0 > r[l]:
            qj = (1.0 - r[l]) / (r[j] - r[l])
            val = qj * cj[j] + (1.0 - qj) * cj[l]
            if val > best:
                best, best_phi = val, (cj[j] - cj[l]) / (r[j] - r[l])
    price = best
    for _ in range(64):
        short = cj - (price + best_phi * (r - 1.0))
        if np.all(short <= 0):
            break
        price = np.nextafter(price + max(float(short.max()), 0.0), np.inf)
    else:  # pragma: no cover - cannot happen for a bounded bump sequence
        raise NumericalFailure("could not certify super-hedge dominance")
    return price, best_phi


def super_hedge_exact(tree: TreeMarket, claim) -> HedgeResult:
    """Backward super-hedging recursion for a claim given at the terminal nodes.

    ``claim`` is either an array of terminal values or a callable of the
    terminal price.
    """
    c = claim(tree.terminal_prices) if callable(claim) else claim
    c = np.asarray(c, dtype=float)
    if c.shape != tree.terminal_prices.shape:
        raise ValidationError("claim must have one value per terminal node")
    if np.any(c < 0) or np.any(~np.isfinite(c)):
        raise ValidationError("claim values must be finite and non-negative")
    r = np.asarray(tree.returns)
    values = [None] * (tree.depth + 1)
    positions = [None] * tree.depth
    values[tree.depth] = c.copy()
    for t in range(tree.depth - 1, -1, -1):
        kids = tree.children(t)
        nxt = values[t + 1]
        vals = np.empty(kids.shape[0])
        phis = np.empty(kids.shape[0])
        for i in range(kids.shape[0]):
            vals[i], phis[i] = _one_step(r, nxt[kids[i]])
        values[t], positions[t] = vals, phis
    return HedgeResult(float(values[0][0]), values, positions)


def check_dominance(tree: TreeMarket, hedge: HedgeResult, claim=None) -> bool:
    """True when wealth ``value + position (r - 1)`` dominates every child value.

    By induction and monotone rounding this gives terminal wealth >= claim on
    every path; if ``claim`` is given, the terminal values are compared too.
    """
    r = np.asarray(tree.returns)
    for t in range(tree.depth):
        kids = tree.children(t)
        wealth = hedge.values[t][:, None] + hedge.positions[t][:, None] * (r[None, :] - 1.0)
        if np.any(wealth < hedge.values[t + 1][kids]):
            return False
    if claim is not None:
        c = claim(tree.terminal_prices) if callable(claim) else np.asarray(claim, float)
        if np.any(hedge.values[tree.depth] < c):
            return False
    return True


# -- primal and dual programs ------------------------------------------------

def _dp_constraints(tree, node_vars, cp):
    """``value(node) >= E_q[value(children)]`` for every node and vertex."""
    Q = tree.vertices
    cons = []
    for t in range(tree.depth):
        kids = tree.children(t)
        for q in Q:
            support = np.flatnonzero(q)
            rhs = sum(q[j] * node_vars[t + 1][kids[:, j]] for j in support)
            cons.append(node_vars[t] >= rhs)
    return cons


def _solve(problem, what):
    import cvxpy as cp

    # accuracy is certified by the reported duality gap, not by solver chatter
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            problem.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10,
                          max_iter=2000)
        except cp.SolverError:
            problem.solve()
    if problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise NumericalFailure(f"{what} program ended with status {problem.status}")
    if problem.status == cp.OPTIMAL_INACCURATE:
        log.info("%s program solved to reduced accuracy; see the reported gap", what)


@dataclass
class PrimalResult:
    u: float
    wealth: np.ndarray
    hedge: HedgeResult = field(repr=False)
    superhedge_cost: float = float("nan")
    capped: bool = False

    def to_dict(self) -> dict:
        return {"u": self.u, "terminal_wealth": self.wealth.tolist(), "capped": self.capped,
                "superhedge_cost": self.superhedge_cost, "hedge": self.hedge.to_dict()}


def _expected_utility(tree, u, V, h):
    return float(tree.terminal_probabilities @ u.value(V, h))


def solve_primal_exact(tree: TreeMarket, u: StateUtility, z: float) -> PrimalResult:
    """Maximize ``sum_w p_w U(V_w)`` over terminal profiles whose super-hedging price is at most z.

    The super-hedging price is expressed through node values ``c`` with
    ``c_root <= z`` and ``c(node) >= E_q[c(children)]`` at every vertex ``q``.
    """
    import cvxpy as cp

    z = float(z)
    if not z > 0:
        raise ValidationError("initial wealth z must be positive")
    h = u.cap(tree.terminal_prices)
    cap_hedge = super_hedge_exact(tree, h)
    if z >= cap_hedge.cost:
        return PrimalResult(_expected_utility(tree, u, h, h), h.copy(), cap_hedge, cap_hedge.cost, True)
    p = tree.terminal_probabilities
    nodes = [cp.Variable(len(tree.counts(t))) for t in range(tree.depth + 1)]
    V = nodes[tree.depth]
    cons = _dp_constraints(tree, nodes, cp) + [nodes[0][0] <= z, V >= 0, V <= h]
    problem = cp.Problem(cp.Minimize(p @ u.loss.cvx(h - V)), cons)
    _solve(problem, "primal")
    Vv = np.clip(np.asarray(V.value, float), 0.0, h)
    hedge = super_hedge_exact(tree, Vv)
    if hedge.cost > z:
        # remove solver-level budget excess by a uniform scaling toward zero
        Vv = Vv * (z / hedge.cost)
        hedge = super_hedge_exact(tree, Vv)
    return PrimalResult(_expected_utility(tree, u, Vv, h), Vv, hedge, cap_hedge.cost, False)


def _flow_program(tree, u, h, y_fixed=None):
    """Dual program in density-ratio form; returns (objective, constraints, y, terminal eta).

    ``kappa`` is the scaled deflator (y xi) at each node.  At a node, vertex
    weights ``w`` with ``sum w <= kappa`` split it across children, and a
    child's ratio collects ``pi(parent) / pi(child) * (w @ Q)`` from every
    parent edge.  Working with ratios instead of masses keeps every
    coefficient of order one.
    """
    import cvxpy as cp
    from scipy import sparse

    Q = tree.vertices
    nv = len(Q)
    m = tree.n_branches
    y = cp.Variable(nonneg=True) if y_fixed is None else float(y_fixed)
    cons = []
    kappa = None
    pi = tree.level_probabilities(0)
    for t in range(tree.depth):
        n_t = len(pi)
        w = cp.Variable((n_t, nv), nonneg=True)
        node_ratio = cp.reshape(y, (1,), order="C") if t == 0 else kappa
        cons.append(cp.sum(w, axis=1) <= node_ratio)
        kids = tree.children(t)
        pi_next = tree.level_probabilities(t + 1)
        rows = kids.ravel()
        cols = np.arange(n_t * m)
        vals = np.repeat(pi, m) / pi_next[rows]
        scatter = sparse.csr_matrix((vals, (rows, cols)), shape=(len(pi_next), n_t * m))
        kappa = scatter @ cp.reshape(w @ Q, (n_t * m,), order="C")
        pi = pi_next
    objective = pi @ u.loss.cvx_dual_utility(kappa, h)
    return objective, cons, y, kappa


@dataclass
class DualResult:
    y: float
    deflator: np.ndarray
    v: float
    bound: float
    primal: float
    gap: float
    budget_residual: float
    wealth: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"y": self.y, "v": self.v, "bound": self.bound, "u": self.primal, "gap": self.gap,
                "budget_residual": self.budget_residual, "deflator": self.deflator.tolist(),
                "terminal_wealth": self.wealth.tolist()}


def tree_dual_value(tree: TreeMarket, u: StateUtility, y: float) -> tuple[float, np.ndarray]:
    """``v(y) = min E[Utilde(y xi_T)]`` over tree deflators; returns (v, xi_T per terminal node)."""
    import cvxpy as cp

    y = float(y)
    if y < 0:
        raise ValidationError("y must be non-negative")
    h = u.cap(tree.terminal_prices)
    p = tree.terminal_probabilities
    if y == 0:
        return float(p @ u.value(h, h)), np.ones_like(h)
    objective, cons, _, eta = _flow_program(tree, u, h, y_fixed=y)
    _solve(cp.Problem(cp.Minimize(objective), cons), "dual")
    xi = np.maximum(np.asarray(eta.value, float), 0.0) / y
    return float(p @ u.dual(y * xi, h)), xi


def solve_dual_exact(tree: TreeMarket, u: StateUtility, z: float,
                     primal: PrimalResult | None = None) -> DualResult:
    """Joint minimization of ``E[Utilde(y xi_T)] + z y`` over y and tree deflators.

    The shadow price is then polished on the budget equation
    ``E[xi_T I(y xi_T)] = z`` with the deflator held fixed, and the gap to
    :func:`solve_primal_exact` is reported.
    """
    import cvxpy as cp

    z = float(z)
    if not z > 0:
        raise ValidationError("initial wealth z must be positive")
    h = u.cap(tree.terminal_prices)
    p = tree.terminal_probabilities
    cost = super_hedge_exact(tree, h).cost
    if z >= cost:
        raise DomainError(f"z={z:g} >= super-hedging cost {cost:.12g}: u(z) = E[U(H)] is attained")
    objective, cons, y, eta = _flow_program(tree, u, h)
    _solve(cp.Problem(cp.Minimize(objective + z * y), cons), "dual")
    y_val = float(y.value)
    if not y_val > 0:
        raise NumericalFailure("dual program returned a zero shadow price")
    xi = np.maximum(np.asarray(eta.value, float), 0.0) / y_val
    y_val = _polish(u, xi, h, p, z, y_val)
    V = u.inverse(y_val * xi, h)
    v = float(p @ u.dual(y_val * xi, h))
    bound = v + z * y_val
    primal = primal or solve_primal_exact(tree, u, z)
    resid = abs(float(p @ (xi * V)) - z)
    return DualResult(y_val, xi, v, bound, primal.u, abs(bound - primal.u), resid, V)


def _polish(u, xi, h, p, z, y0):
    budget = lambda y: float(p @ (xi * u.inverse(y * xi, h)))  # noqa: E731
    lo, hi = 0.0, 2.0 * y0
    while budget(hi) > z and hi < 1e12:
        hi *= 2.0
    if not budget(lo) > z >= budget(hi):
        return y0
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        if budget(mid) > z:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 2 * np.finfo(float).eps * hi:
            break
    return min((lo, hi), key=lambda y: abs(budget(y) - z))
