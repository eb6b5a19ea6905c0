"""Dual elements: deflators xi = xi0 * E(X - A) parametrized by controls (G, F, a).

``X = int G dW + int int F dNtilde`` and ``A = int a dt``.  Controls are
piecewise constant in time and affine in log S::

    G(t, x) = g[k, 0] + g[k, 1] * x        (k = time bucket of t, x = log S)
    F(t, z_i, x) = f[k, i, 0] + f[k, i, 1] * x
    a(t, x) = a[k, 0] + a[k, 1] * x

A deflator keeps xi * V a supermartingale for every admissible strategy when
``hat_h <= a`` with ``h = b + sigma G + sum_i lambda_i v_i F_i`` (the drift
of xi * S per unit xi * S).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DiscretizationError,
    NoEquivalentMeasureError,
    UnsupportedStructureError,
    ValidationError,
)
from .market_model import LevyMarketSpec, PathEnsemble

__all__ = [
    "ControlBasis",
    "DualElement",
    "FeasibilityReport",
    "stochastic_exponential",
    "drift_h",
    "hat_h",
    "hat_h_from_drift",
    "feasibility_check",
    "martingale_lift",
    "risk_neutral_density",
    "FEASIBILITY_TOL",
]

FEASIBILITY_TOL = 1e-10
_F_TOL = 1e-12
# drifts this small are rounding residue of an exact cancellation
_H_SNAP = 1e-13


@dataclass(frozen=True)
class ControlBasis:
    """Time buckets ``[edges[j], edges[j+1])`` times the features ``{1, log S}``."""

    edges: tuple

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        if len(edges) < 2 or edges[0] != 0.0 or any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValidationError("basis edges must start at 0 and increase strictly")
        object.__setattr__(self, "edges", edges)

    @classmethod
    def uniform(cls, T: float, n_buckets: int = 1) -> "ControlBasis":
        return cls(tuple(np.linspace(0.0, T, int(n_buckets) + 1)))

    @classmethod
    def for_spec(cls, spec: LevyMarketSpec, n_buckets: int = 1) -> "ControlBasis":
        """Uniform buckets refined by the coefficient breakpoints."""
        edges = np.union1d(np.linspace(0.0, spec.T, int(n_buckets) + 1), spec.time_knots())
        return cls(tuple(edges))

    @property
    def n_buckets(self) -> int:
        return len(self.edges) - 1

    @property
    def starts(self) -> np.ndarray:
        return np.asarray(self.edges[:-1])

    def bucket(self, t) -> np.ndarray:
        idx = np.searchsorted(self.edges, np.asarray(t, float), side="right") - 1
        return np.clip(idx, 0, self.n_buckets - 1)


@dataclass(frozen=True)
class DualElement:
    """Coefficient representation of a deflator.

    ``g`` and ``a`` have shape (n_buckets, 2), ``f`` (n_buckets, n_atoms, 2).
    When ``lift`` holds a market spec, the element is the martingale lift of
    the stored controls: F is replaced by F + D and a by 0 at evaluation time.
    """

    basis: ControlBasis
    g: np.ndarray
    f: np.ndarray
    a: np.ndarray
    xi0: float = 1.0
    lift: LevyMarketSpec | None = field(default=None, compare=False)

    def __post_init__(self):
        nb = self.basis.n_buckets
        g = np.array(self.g, dtype=float).reshape(nb, 2)
        a = np.array(self.a, dtype=float).reshape(nb, 2)
        f = np.array(self.f, dtype=float)
        f = f.reshape(nb, -1, 2) if f.size else np.zeros((nb, 0, 2))
        for arr in (g, f, a):
            arr.flags.writeable = False
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "a", a)
        if not (0.0 < float(self.xi0) <= 1.0):
            raise ValidationError("xi0 must lie in (0, 1]")
        object.__setattr__(self, "xi0", float(self.xi0))

    @classmethod
    def zeros(cls, basis: ControlBasis, n_atoms: int, xi0: float = 1.0) -> "DualElement":
        nb = basis.n_buckets
        return cls(basis, np.zeros((nb, 2)), np.zeros((nb, n_atoms, 2)), np.zeros((nb, 2)), xi0)

    @property
    def n_atoms(self) -> int:
        return self.f.shape[1]

    def raw_controls(self, t, log_s):
        """(G, F, a) from the stored coefficients, ignoring any lift."""
        k = self.basis.bucket(t)
        x = np.asarray(log_s, dtype=float)
        k, x = np.broadcast_arrays(k, x)
        G = self.g[k, 0] + self.g[k, 1] * x
        F = self.f[k, :, 0] + self.f[k, :, 1] * x[..., None]
        a = self.a[k, 0] + self.a[k, 1] * x
        return G, F, a

    def controls(self, t, log_s):
        """(G, F, a) at times ``t`` and log-prices ``log_s``; F gains a trailing atom axis."""
        G, F, a = self.raw_controls(t, log_s)
        if self.lift is None:
            return G, F, a
        t_arr = np.broadcast_to(np.asarray(t, float), np.shape(G))
        h = _drift(self.lift, t_arr, G, F)
        D = _lift_field(self.lift, t_arr, h)
        return G, F + D, np.zeros_like(a)

    def coefficient_table(self) -> list:
        """Flat ``(basis id, coefficient)`` rows ordered by control, bucket, feature."""
        feats = ("1", "logS")
        rows = []
        for k in range(self.basis.n_buckets):
            for j in range(2):
                rows.append((f"G|b{k}|{feats[j]}", float(self.g[k, j])))
        for k in range(self.basis.n_buckets):
            for i in range(self.n_atoms):
                for j in range(2):
                    rows.append((f"F{i}|b{k}|{feats[j]}", float(self.f[k, i, j])))
        for k in range(self.basis.n_buckets):
            for j in range(2):
                rows.append((f"a|b{k}|{feats[j]}", float(self.a[k, j])))
        return rows

    def to_dict(self) -> dict:
        return {
            "xi0": self.xi0,
            "bucket_edges": list(self.basis.edges),
            "martingale_lift": self.lift is not None,
            "coefficients": [{"basis": name, "value": value} for name, value in self.coefficient_table()],
        }


# -- drift ---------------------------------------------------------------

def _v_grid(spec: LevyMarketSpec, t) -> np.ndarray:
    """v(t, z_i) for an array of times; trailing atom axis."""
    t = np.asarray(t, dtype=float)
    if spec.n_atoms == 0:
        return np.zeros(t.shape + (0,))
    uniq, inv = np.unique(t.ravel(), return_inverse=True)
    table = np.stack([spec.v(s) for s in uniq])
    return table[inv].reshape(t.shape + (spec.n_atoms,))


def _drift(spec, t, G, F):
    t = np.asarray(t, dtype=float)
    v = _v_grid(spec, t)
    return spec.b(t) + spec.sigma(t) * G + np.sum(spec.intensities * v * F, axis=-1)


def drift_h(spec: LevyMarketSpec, d: DualElement, t, log_s):
    """``h = b + sigma G + sum_i lambda_i v(t, z_i) F(t, z_i)``."""
    G, F, _ = d.controls(t, log_s)
    t_arr = np.broadcast_to(np.asarray(t, float), np.shape(G))
    return _drift(spec, t_arr, G, F)


def hat_h_from_drift(spec: LevyMarketSpec, h, t):
    """Minimal compensation rate for drift ``h`` (0 * inf = 0)."""
    h = np.asarray(h, dtype=float)
    h = np.where(np.abs(h) <= _H_SNAP, 0.0, h)
    t_arr = np.broadcast_to(np.asarray(t, float), h.shape)
    if spec.n_atoms == 0:
        return np.where(h == 0.0, 0.0, np.inf)
    if spec.case == "multiplicative":
        zeta = np.asarray(spec.jumps.zeta(t_arr), dtype=float)
        hz = h / zeta
        up, down = spec.jumps.theta_max, spec.jumps.theta_min
    else:
        v = _v_grid(spec, t_arr)
        hz = h
        up, down = v.max(axis=-1), v.min(axis=-1)
    up = np.broadcast_to(np.asarray(up, float), hz.shape)
    down = np.broadcast_to(np.asarray(down, float), hz.shape)
    out = np.zeros(hz.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        neg = hz < 0
        out = np.where(neg, np.where(up > 0, -hz / np.where(up > 0, up, 1.0), np.inf), out)
        pos = hz > 0
        out = np.where(pos, np.where(down < 0, -hz / np.where(down < 0, down, 1.0), np.inf), out)
    return out


def hat_h(spec: LevyMarketSpec, d: DualElement, t, log_s):
    """Smallest admissible compensation rate given the strategy constraints."""
    return hat_h_from_drift(spec, drift_h(spec, d, t, log_s), t)


# -- lift ----------------------------------------------------------------

def _lift_field(spec: LevyMarketSpec, t, h):
    """D(t, z) with ``h + sum_i lambda_i v_i D_i = 0`` and D >= 0.

    Atom case: D sits on the extreme atom matching the sign of h (lowest index
    on ties).  Multiplicative case: D is spread over the level set where theta
    attains its extreme, proportionally to the intensities.
    """
    k = spec.n_atoms
    h = np.asarray(h, dtype=float)
    D = np.zeros(h.shape + (k,))
    if k == 0:
        return D
    lam = spec.intensities
    t = np.asarray(t, dtype=float)
    if spec.case == "multiplicative":
        th = np.asarray(spec.jumps.theta_values)
        zeta = np.asarray(spec.jumps.zeta(t), dtype=float)
        hz = h / zeta
        for level, active in ((th.max(), (hz < 0) & (th.max() > 0)), (th.min(), (hz > 0) & (th.min() < 0))):
            members = np.isclose(th, level, rtol=1e-12, atol=0.0)
            mass = float(lam[members].sum())
            if mass <= 0:
                raise UnsupportedStructureError("no atom attains the extreme of theta")
            amount = np.where(active, -hz / (level * mass), 0.0)
            D = D + amount[..., None] * members
        return D
    v = _v_grid(spec, t)
    i_max = np.argmax(v, axis=-1)
    i_min = np.argmin(v, axis=-1)
    v_max = np.take_along_axis(v, i_max[..., None], -1)[..., 0]
    v_min = np.take_along_axis(v, i_min[..., None], -1)[..., 0]
    use_max = (h < 0) & (v_max > 0)
    use_min = (h > 0) & (v_min < 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        amt_max = np.where(use_max, -h / (v_max * lam[i_max]), 0.0)
        amt_min = np.where(use_min, -h / (v_min * lam[i_min]), 0.0)
    np.put_along_axis(D, i_max[..., None], amt_max[..., None], -1)
    cur = np.take_along_axis(D, i_min[..., None], -1)[..., 0]
    np.put_along_axis(D, i_min[..., None], (cur + amt_min)[..., None], -1)
    return D


def martingale_lift(spec: LevyMarketSpec, d: DualElement) -> DualElement:
    """Replace (F, a) by (F + D, 0) so the drift vanishes at every node.

    For a feasible input the lifted deflator dominates the original pathwise.
    """
    if d.lift is not None:
        return d
    if spec.case == "multiplicative":
        th = np.asarray(spec.jumps.theta_values)
        for level in (th.max(), th.min()):
            if not np.any(np.isclose(th, level, rtol=1e-12, atol=0.0)):
                raise UnsupportedStructureError("theta extremes are not attained by any atom")
    return replace(d, lift=spec)


# -- evaluation ----------------------------------------------------------

def stochastic_exponential(ensemble: PathEnsemble, d: DualElement) -> np.ndarray:
    """Deflator samples ``xi_k`` of shape (n_paths, n_steps + 1).

    Per step ``xi_{k+1} = xi_k (1 + G dW - dt (sum_i lambda_i F_i + a)) prod_i (1 + F_i)^{N_i}``;
    a jump with F = -1 sends xi to zero for good.
    """
    spec = ensemble.spec
    if d.n_atoms != spec.n_atoms:
        raise ValidationError("dual element and market disagree on the number of atoms")
    dt = ensemble.dt
    lam = spec.intensities
    n_paths, n = ensemble.n_paths, ensemble.n_steps
    xi = np.empty((n_paths, n + 1))
    xi[:, 0] = d.xi0
    log_s = ensemble.log_s
    for k in range(n):
        G, F, a = d.controls(ensemble.times[k], log_s[:, k])
        alive = xi[:, k] > 0
        if np.any(F[alive] < -1.0 - _F_TOL):
            raise ValidationError(f"F < -1 at step {k}")
        cont = 1.0 + G * ensemble.dW[:, k] - dt * (F @ lam + a)
        bad = alive & (cont < 0.0)
        if np.any(bad):
            p = int(np.flatnonzero(bad)[0])
            raise DiscretizationError(
                f"deflator step factor {cont[p]:.3g} < 0 on path {p} at step {k}", step=k, path=p)
        counts = ensemble.jump_counts[:, k, :]
        if counts.size:
            jump = np.prod(np.where(counts > 0, np.maximum(1.0 + F, 0.0) ** counts, 1.0), axis=1)
        else:
            jump = 1.0
        xi[:, k + 1] = np.where(alive, xi[:, k] * cont * jump, 0.0)
    return xi


@dataclass
class FeasibilityReport:
    feasible: bool
    max_violation: float
    location: tuple | None
    f_violation: bool
    min_F: float
    negative_a: bool

    def to_dict(self):
        return {
            "feasible": self.feasible,
            "max_violation": self.max_violation,
            "location": list(self.location) if self.location else None,
            "f_violation": self.f_violation,
            "min_F": self.min_F,
            "negative_a": self.negative_a,
        }


def feasibility_check(spec: LevyMarketSpec, d: DualElement, ensemble: PathEnsemble,
                      tol: float = FEASIBILITY_TOL) -> FeasibilityReport:
    """Check ``F >= -1`` and ``hat_h <= a + tol`` at every node visited before sinking.

    Diagnostic only: infeasibility is reported, never raised.  ``location`` is
    ``(path, step)`` of the largest positive ``hat_h - a``.
    """
    n = ensemble.n_steps
    t = np.broadcast_to(ensemble.times[:-1], (ensemble.n_paths, n))
    x = ensemble.log_s[:, :-1]
    G, F, a = d.controls(t, x)
    h = _drift(spec, t, G, F)
    hh = hat_h_from_drift(spec, h, t)

    # sinking: a jump at an atom where F = -1 kills the deflator after that step
    sinks = np.any((ensemble.jump_counts > 0) & (F <= -1.0 + _F_TOL), axis=2)
    dead_after = np.cumsum(sinks, axis=1) - sinks
    alive = dead_after == 0

    viol = np.where(alive, hh - a, -np.inf)
    worst = float(np.max(viol)) if viol.size else -np.inf
    loc = None
    if viol.size and worst > tol:
        p, k = np.unravel_index(int(np.argmax(viol)), viol.shape)
        loc = (int(p), int(k))
    min_F = float(np.min(np.where(alive[..., None], F, np.inf))) if F.size else np.inf
    f_bad = bool(min_F < -1.0 - _F_TOL)
    a_bad = bool(np.any(np.where(alive, a, 0.0) < -tol))
    feasible = (worst <= tol) and not f_bad and not a_bad
    return FeasibilityReport(feasible, max(worst, 0.0), loc, f_bad, min_F, a_bad)


def risk_neutral_density(spec: LevyMarketSpec, basis: ControlBasis | None = None) -> DualElement:
    """Local-martingale deflator (a = 0, h = 0) solving ``b + sigma G + sum lambda v F = 0``.

    With ``sigma > 0``: ``G = -b / sigma`` and ``F = 0``.  Otherwise F is the
    minimal ``L2(nu)`` solution ``F_i = -b v_i / sum_j lambda_j v_j^2``; when
    that violates ``F > -1`` a linear program looks for any admissible F.
    """
    basis = basis or ControlBasis.for_spec(spec)
    nb, k = basis.n_buckets, spec.n_atoms
    g = np.zeros((nb, 2))
    f = np.zeros((nb, k, 2))
    lam = spec.intensities
    for j, t in enumerate(basis.starts):
        b, sig = spec.b(t), spec.sigma(t)
        if sig > 0:
            g[j, 0] = -b / sig
            continue
        if b == 0.0:
            continue
        v = spec.v(t)
        denom = float(np.sum(lam * v * v))
        if denom == 0.0:
            raise NoEquivalentMeasureError("no jumps and no diffusion to absorb a non-zero drift")
        F = -b * v / denom
        if np.any(F <= -1.0):
            F = _feasible_jump_density(b, lam, v)
        f[j, :, 0] = F
    return DualElement(basis, g, f, np.zeros((nb, 2)), 1.0)


def _feasible_jump_density(b, lam, v, margin=1e-3):
    from scipy.optimize import linprog

    # maximize the slack s subject to sum lambda v F = -b, F >= -1 + s
    k = len(v)
    c = np.zeros(k + 1)
    c[-1] = -1.0
    A_eq = np.concatenate([lam * v, [0.0]])[None, :]
    A_ub = np.hstack([-np.eye(k), np.ones((k, 1))])
    b_ub = np.ones(k)
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[-b],
                  bounds=[(None, None)] * k + [(None, 1.0)], method="highs")
    if res.status != 0 or res.x[-1] <= margin:
        raise NoEquivalentMeasureError(
            "no jump density with F > -1 removes the drift: every atom pushes the same way")
    return res.x[:k]
