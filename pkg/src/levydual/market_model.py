"""Finite-activity Levy market: specification, path simulation and wealth dynamics.

The discounted stock follows

    dS_t = S_{t-} ( b_t dt + sigma_t dW_t + int v(t, z) Ntilde(dt, dz) )

with a Levy measure made of finitely many atoms.  Paths are produced by a
multiplicative Euler scheme whose jump times are sampled exactly from
exponential clocks, one clock per atom.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import DiscretizationError, InadmissibleStrategyError, ValidationError

__all__ = [
    "PiecewiseConstant",
    "FiniteAtoms",
    "Multiplicative",
    "LevyMarketSpec",
    "PathEnsemble",
    "PathView",
    "Strategy",
    "simulate_paths",
    "wealth_path",
    "wealth_paths",
    "admissible_bounds",
    "MAX_REFINEMENT_DEPTH",
]

MAX_REFINEMENT_DEPTH = 20

# Philox key words; the second word selects the stream.
_CHANNEL_PATH = 0x5A17
_CHANNEL_BRIDGE = 0xB41D


@dataclass(frozen=True)
class PiecewiseConstant:
    """Right-continuous step function: ``values[j]`` on ``[knots[j], knots[j+1])``.

    ``knots[0]`` must be 0; the last value extends to +infinity.
    """

    knots: tuple
    values: tuple

    def __post_init__(self):
        knots = tuple(float(k) for k in self.knots)
        values = tuple(float(v) for v in self.values)
        if len(knots) != len(values) or not knots:
            raise ValidationError("knots and values must have the same non-zero length")
        if knots[0] != 0.0 or any(b <= a for a, b in zip(knots, knots[1:])):
            raise ValidationError("knots must start at 0 and increase strictly")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value: float) -> "PiecewiseConstant":
        return cls((0.0,), (value,))

    def __call__(self, t):
        idx = np.searchsorted(self.knots, np.asarray(t, dtype=float), side="right") - 1
        out = np.asarray(self.values)[np.clip(idx, 0, len(self.values) - 1)]
        return float(out) if np.ndim(out) == 0 else out

    @property
    def is_constant(self) -> bool:
        return len(set(self.values)) == 1

    def min(self) -> float:
        return min(self.values)


def as_time_function(x) -> PiecewiseConstant:
    if isinstance(x, PiecewiseConstant):
        return x
    return PiecewiseConstant.constant(float(x))


@dataclass(frozen=True)
class FiniteAtoms:
    """Levy measure with atoms ``z_i`` and intensities ``lambda_i``.

    ``jump_coeff(t, z)`` gives the relative price jump v(t, z); it defaults to
    ``v(t, z) = z`` (the time-homogeneous case).
    """

    atoms: tuple
    intensities: tuple
    jump_coeff: Callable | None = None

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(float(z) for z in self.atoms))
        object.__setattr__(self, "intensities", tuple(float(l) for l in self.intensities))

    def v(self, t: float) -> np.ndarray:
        z = np.asarray(self.atoms, dtype=float)
        if self.jump_coeff is None:
            return z.copy()
        return np.array([float(self.jump_coeff(t, zi)) for zi in z])


@dataclass(frozen=True)
class Multiplicative:
    """Jump coefficient of product form ``v(t, z) = zeta_t * theta(z)``.

    ``theta`` is either a callable evaluated at the atoms or the sequence of
    its values at the atoms.
    """

    zeta: PiecewiseConstant | float
    theta: Callable | Sequence[float]
    atoms: tuple
    intensities: tuple
    theta_values: tuple = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "zeta", as_time_function(self.zeta))
        object.__setattr__(self, "atoms", tuple(float(z) for z in self.atoms))
        object.__setattr__(self, "intensities", tuple(float(l) for l in self.intensities))
        if callable(self.theta):
            vals = tuple(float(self.theta(z)) for z in self.atoms)
        else:
            vals = tuple(float(x) for x in self.theta)
        object.__setattr__(self, "theta_values", vals)

    def v(self, t: float) -> np.ndarray:
        return self.zeta(t) * np.asarray(self.theta_values, dtype=float)

    @property
    def theta_max(self) -> float:
        return max(self.theta_values)

    @property
    def theta_min(self) -> float:
        return min(self.theta_values)


@dataclass(frozen=True)
class LevyMarketSpec:
    """Coefficients of the discounted price SDE and its finite Levy measure."""

    b: PiecewiseConstant | float = 0.0
    sigma: PiecewiseConstant | float = 0.0
    jumps: FiniteAtoms | Multiplicative | None = None
    s0: float = 1.0
    T: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "b", as_time_function(self.b))
        object.__setattr__(self, "sigma", as_time_function(self.sigma))
        object.__setattr__(self, "s0", float(self.s0))
        object.__setattr__(self, "T", float(self.T))
        if self.jumps is None:
            object.__setattr__(self, "jumps", FiniteAtoms((), ()))
        self.validate()

    # -- structure -------------------------------------------------------
    @property
    def case(self) -> str:
        """``"atoms"`` (finitely many atoms) or ``"multiplicative"``."""
        return "multiplicative" if isinstance(self.jumps, Multiplicative) else "atoms"

    @property
    def n_atoms(self) -> int:
        return len(self.jumps.atoms)

    @property
    def atoms(self) -> np.ndarray:
        return np.asarray(self.jumps.atoms, dtype=float)

    @property
    def intensities(self) -> np.ndarray:
        return np.asarray(self.jumps.intensities, dtype=float)

    def v(self, t: float) -> np.ndarray:
        """Relative jump sizes v(t, z_i) at every atom."""
        return self.jumps.v(float(t))

    def time_knots(self) -> tuple:
        """Union of the breakpoints of the piecewise-constant coefficients."""
        knots = set(self.b.knots) | set(self.sigma.knots)
        if isinstance(self.jumps, Multiplicative):
            knots |= set(self.jumps.zeta.knots)
        return tuple(sorted(k for k in knots if k < self.T))

    @property
    def is_time_homogeneous(self) -> bool:
        homog = self.b.is_constant and self.sigma.is_constant
        if isinstance(self.jumps, Multiplicative):
            homog = homog and self.jumps.zeta.is_constant
        elif self.jumps.jump_coeff is not None:
            homog = False
        return homog

    def validate(self) -> None:
        if not (self.s0 > 0 and np.isfinite(self.s0)):
            raise ValidationError(f"s0 must be positive, got {self.s0}")
        if not (self.T > 0 and np.isfinite(self.T)):
            raise ValidationError(f"horizon T must be positive, got {self.T}")
        if self.sigma.min() < 0:
            raise ValidationError("sigma must be non-negative")
        lam = self.intensities
        if len(lam) != len(self.jumps.atoms):
            raise ValidationError("one intensity per atom is required")
        if np.any(~np.isfinite(lam)) or np.any(lam <= 0):
            raise ValidationError("jump intensities must be finite and strictly positive")
        if isinstance(self.jumps, Multiplicative):
            if any(z == 0.0 for z in self.jumps.zeta.values):
                raise ValidationError("zeta must not vanish")
            if any(th == 0.0 for th in self.jumps.theta_values):
                raise ValidationError("theta must not vanish on the atoms")
            if len(self.jumps.theta_values) != len(self.jumps.atoms):
                raise ValidationError("one theta value per atom is required")
        if self.n_atoms:
            grid = np.union1d(np.linspace(0.0, self.T, 257), self.time_knots())
            for t in grid:
                v = self.v(t)
                if np.any(~np.isfinite(v)) or np.any(v <= -1.0):
                    raise ValidationError(f"jump coefficient must exceed -1 (violated at t={t:g})")


class PathView(NamedTuple):
    """Read-only slice of an ensemble: one simulated path."""

    times: np.ndarray
    S: np.ndarray
    dW: np.ndarray
    jump_counts: np.ndarray

    @property
    def log_s(self) -> np.ndarray:
        return np.log(self.S)


@dataclass(frozen=True)
class PathEnsemble:
    """Immutable batch of simulated paths on a uniform grid.

    Arrays: ``S`` (n_paths, n_steps+1), ``dW`` (n_paths, n_steps) Brownian
    increments, ``jump_counts`` (n_paths, n_steps, n_atoms) and the jump
    event list ``jump_events`` with columns (path, step, atom) in path-major order.
    """

    spec: LevyMarketSpec
    times: np.ndarray
    S: np.ndarray
    dW: np.ndarray
    jump_counts: np.ndarray
    jump_events: np.ndarray
    jump_times: np.ndarray
    seed: int

    def __post_init__(self):
        for name in ("times", "S", "dW", "jump_counts", "jump_events", "jump_times"):
            getattr(self, name).flags.writeable = False

    @property
    def n_paths(self) -> int:
        return self.S.shape[0]

    @property
    def n_steps(self) -> int:
        return self.S.shape[1] - 1

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def log_s(self) -> np.ndarray:
        return np.log(self.S)

    @property
    def S_T(self) -> np.ndarray:
        return self.S[:, -1]

    def path(self, i: int) -> PathView:
        return PathView(self.times, self.S[i], self.dW[i], self.jump_counts[i])

    def subset(self, n: int) -> "PathEnsemble":
        """First ``n`` paths; identical to simulating ``n`` paths with the same seed."""
        keep = self.jump_events[:, 0] < n
        return PathEnsemble(
            self.spec, self.times, self.S[:n].copy(), self.dW[:n].copy(),
            self.jump_counts[:n].copy(), self.jump_events[keep].copy(),
            self.jump_times[keep].copy(), self.seed,
        )

    def to_csv(self, target=None) -> str | None:
        """Write ``path_id,step,t,S,dW,jump_atom`` rows, one per grid node.

        Row ``k`` holds the state at ``t_k`` and the increment over
        ``(t_{k-1}, t_k]``; several atoms jumping in one step are joined by ``;``.
        """
        own = target is None
        fh = io.StringIO() if own else target
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path_id", "step", "t", "S", "dW", "jump_atom"])
        events = {}
        for p, k, a in self.jump_events:
            events.setdefault((int(p), int(k)), []).append(str(int(a)))
        fmt = "{:.17g}".format
        for p in range(self.n_paths):
            for k in range(self.n_steps + 1):
                dw = self.dW[p, k - 1] if k else 0.0
                atoms = ";".join(events.get((p, k - 1), [])) if k else ""
                writer.writerow([p, k, fmt(self.times[k]), fmt(self.S[p, k]), fmt(dw), atoms])
        return fh.getvalue() if own else None


def _seed_word(seed: int) -> int:
    return int(seed) % (1 << 64)


def _path_generator(seed: int, channel: int, path: int, step: int = 0) -> np.random.Generator:
    bitgen = np.random.Philox(key=[_seed_word(seed), channel], counter=[0, 0, step, path])
    return np.random.Generator(bitgen)


def _grid(spec: LevyMarketSpec, n_steps: int) -> np.ndarray:
    return np.linspace(0.0, spec.T, n_steps + 1)


def _step_factor(b, sigma, v, lam, dt, dw, counts):
    return 1.0 + b * dt + sigma * dw + counts @ v - dt * float(lam @ v)


def _refine(spec, seed, path, step, t0, t1, dw, jump_t, jump_a, depth, gen):
    """Split ``(t0, t1]`` with a Brownian bridge until every sub-factor is positive."""
    if depth > MAX_REFINEMENT_DEPTH:
        raise DiscretizationError(
            f"step factor stays non-positive after {MAX_REFINEMENT_DEPTH} halvings "
            f"(path {path}, step {step})", step=step, path=path)
    tm = 0.5 * (t0 + t1)
    h = t1 - t0
    dw_left = 0.5 * dw + np.sqrt(h / 4.0) * gen.standard_normal()
    lam = spec.intensities
    total = 1.0
    for a, b_, dwi in ((t0, tm, dw_left), (tm, t1, dw - dw_left)):
        mask = (jump_t > a) & (jump_t <= b_)
        counts = np.bincount(jump_a[mask], minlength=spec.n_atoms).astype(float)
        v = spec.v(a)
        f = _step_factor(spec.b(a), spec.sigma(a), v, lam, b_ - a, dwi, counts)
        if f <= 0.0:
            f = _refine(spec, seed, path, step, a, b_, dwi, jump_t[mask], jump_a[mask], depth + 1, gen)
        total *= f
    return total


def simulate_paths(spec: LevyMarketSpec, n_steps: int, n_paths: int, seed: int) -> PathEnsemble:
    """Simulate discounted price paths on a uniform grid of ``n_steps`` steps.

    Each path owns a counter-based Philox stream keyed by ``(seed, channel)``
    with the path index in the counter, so a path does not depend on how many
    other paths are drawn or in which order.
    """
    if int(n_steps) < 1 or int(n_paths) < 1:
        raise ValidationError("n_steps and n_paths must be positive integers")
    spec.validate()
    n_steps, n_paths = int(n_steps), int(n_paths)
    times = _grid(spec, n_steps)
    dt = spec.T / n_steps
    k = spec.n_atoms
    lam = spec.intensities

    dW = np.empty((n_paths, n_steps))
    counts = np.zeros((n_paths, n_steps, k), dtype=np.int32)
    ev_path, ev_step, ev_atom, ev_time = [], [], [], []
    for p in range(n_paths):
        gen = _path_generator(seed, _CHANNEL_PATH, p)
        dW[p] = np.sqrt(dt) * gen.standard_normal(n_steps)
        pt, pa = [], []
        for i in range(k):
            t = gen.exponential(1.0 / lam[i])
            while t <= spec.T:
                pt.append(t)
                pa.append(i)
                t += gen.exponential(1.0 / lam[i])
        if pt:
            order = np.lexsort((pa, pt))
            pt = np.asarray(pt)[order]
            pa = np.asarray(pa)[order]
            steps = np.minimum(np.searchsorted(times, pt, side="left") - 1, n_steps - 1)
            steps = np.maximum(steps, 0)
            np.add.at(counts[p], (steps, pa), 1)
            ev_path.extend([p] * len(pt))
            ev_step.extend(steps.tolist())
            ev_atom.extend(pa.tolist())
            ev_time.extend(pt.tolist())

    S = np.empty((n_paths, n_steps + 1))
    S[:, 0] = spec.s0
    ev_path_a = np.asarray(ev_path, dtype=np.int64)
    ev_step_a = np.asarray(ev_step, dtype=np.int64)
    ev_atom_a = np.asarray(ev_atom, dtype=np.int64)
    ev_time_a = np.asarray(ev_time, dtype=float)
    for s in range(n_steps):
        t = times[s]
        v = spec.v(t) if k else np.zeros(0)
        comp = dt * float(lam @ v) if k else 0.0
        jump = counts[:, s, :] @ v if k else 0.0
        factor = 1.0 + spec.b(t) * dt + spec.sigma(t) * dW[:, s] + jump - comp
        for p in np.flatnonzero(factor <= 0.0):
            sel = (ev_path_a == p) & (ev_step_a == s)
            gen = _path_generator(seed, _CHANNEL_BRIDGE, int(p), s)
            factor[p] = _refine(spec, seed, int(p), s, t, times[s + 1], dW[p, s],
                                ev_time_a[sel], ev_atom_a[sel], 1, gen)
        S[:, s + 1] = S[:, s] * factor

    events = np.column_stack([ev_path_a, ev_step_a, ev_atom_a]) if ev_path else np.zeros((0, 3), dtype=np.int64)
    return PathEnsemble(spec, times, S, dW, counts, events, ev_time_a, int(seed))


@dataclass(frozen=True)
class Strategy:
    """Proportion of wealth held in the stock.

    Build with :meth:`constant`, :meth:`piecewise` or :meth:`tabulated`.
    """

    kind: str
    payload: object
    label: str = ""

    @classmethod
    def constant(cls, beta: float, label: str | None = None) -> "Strategy":
        return cls("constant", float(beta), label or f"beta={float(beta):g}")

    @classmethod
    def piecewise(cls, knots, values, label: str | None = None) -> "Strategy":
        return cls("piecewise", PiecewiseConstant(knots, values), label or "piecewise")

    @classmethod
    def tabulated(cls, t_grid, x_grid, table, label: str | None = None) -> "Strategy":
        """Bilinear interpolation of ``table[i, j] = beta(t_grid[i], x_grid[j])``, clamped at the edges."""
        from scipy.interpolate import RegularGridInterpolator

        interp = RegularGridInterpolator(
            (np.asarray(t_grid, float), np.asarray(x_grid, float)), np.asarray(table, float),
            bounds_error=False, fill_value=None)
        lo = (float(np.min(t_grid)), float(np.min(x_grid)))
        hi = (float(np.max(t_grid)), float(np.max(x_grid)))
        return cls("tabulated", (interp, lo, hi), label or "tabulated")

    def values(self, t, log_s) -> np.ndarray:
        """beta evaluated at times ``t`` and log-prices ``log_s`` (broadcast)."""
        t, log_s = np.broadcast_arrays(np.asarray(t, float), np.asarray(log_s, float))
        if self.kind == "constant":
            return np.full(t.shape, self.payload)
        if self.kind == "piecewise":
            return np.asarray(self.payload(t), dtype=float)
        interp, lo, hi = self.payload
        pts = np.stack([np.clip(t, lo[0], hi[0]), np.clip(log_s, lo[1], hi[1])], axis=-1)
        return interp(pts.reshape(-1, 2)).reshape(t.shape)


def wealth_path(path: PathView, strategy: Strategy, w: float) -> np.ndarray:
    """Self-financed wealth ``V_{k+1} = V_k (1 + beta_k dS_k / S_k)`` along one path."""
    if w < 0:
        raise ValidationError("initial wealth must be non-negative")
    S = np.asarray(path.S, dtype=float)
    beta = strategy.values(path.times[:-1], np.log(S[:-1]))
    factors = 1.0 + beta * (S[1:] / S[:-1] - 1.0)
    bad = np.flatnonzero(factors < 0.0)
    if bad.size:
        k = int(bad[0])
        raise InadmissibleStrategyError(
            f"wealth turns negative at step {k} with beta={beta[k]:g}", step=k, beta=float(beta[k]))
    V = np.empty_like(S)
    V[0] = w
    V[1:] = w * np.cumprod(factors)
    return V


def wealth_paths(ensemble: PathEnsemble, strategy: Strategy, w: float) -> np.ndarray:
    """Vectorized :func:`wealth_path` over the whole ensemble."""
    if w < 0:
        raise ValidationError("initial wealth must be non-negative")
    S = ensemble.S
    times = np.broadcast_to(ensemble.times[:-1], S[:, :-1].shape)
    beta = strategy.values(times, np.log(S[:, :-1]))
    factors = 1.0 + beta * (S[:, 1:] / S[:, :-1] - 1.0)
    if np.any(factors < 0.0):
        p, k = np.argwhere(factors < 0.0)[0]
        raise InadmissibleStrategyError(
            f"wealth turns negative on path {p} at step {k} with beta={beta[p, k]:g}",
            step=int(k), beta=float(beta[p, k]))
    V = np.empty_like(S)
    V[:, 0] = w
    V[:, 1:] = w * np.cumprod(factors, axis=1)
    return V


def admissible_bounds(spec: LevyMarketSpec, t: float, state=None) -> tuple[float, float]:
    """Closed interval of admissible proportions beta at time ``t``.

    Atom case: ``-1/(max v v 0) <= beta <= -1/(min v ^ 0)``.  Multiplicative
    case: the same bounds on ``beta * zeta_t`` with theta's extremes,
    converted back to beta through the sign of zeta.  ``state`` is accepted
    for interface symmetry; the bounds do not depend on it.
    """
    if spec.n_atoms == 0:
        return -np.inf, np.inf
    if spec.case == "multiplicative":
        th_hi, th_lo = spec.jumps.theta_max, spec.jumps.theta_min
        lo = -1.0 / th_hi if th_hi > 0 else -np.inf
        hi = -1.0 / th_lo if th_lo < 0 else np.inf
        zeta = float(spec.jumps.zeta(t))
        if zeta > 0:
            return lo / zeta, hi / zeta
        return hi / zeta, lo / zeta
    v = spec.v(t)
    vmax, vmin = float(v.max()), float(v.min())
    lo = -1.0 / vmax if vmax > 0 else -np.inf
    hi = -1.0 / vmin if vmin < 0 else np.inf
    return lo, hi
