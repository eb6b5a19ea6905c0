"""Capped state-dependent utilities built from a shortfall loss.

For a claim ``H`` and a convex increasing loss ``L`` with ``L(0) = 0`` the
utility of terminal wealth ``v`` is ``U(v) = L(H) - L((H - v)^+)``; it is flat
beyond the cap ``H``.  The dual function, the generalized inverse of the
marginal utility and their closed forms for the standard losses live here.

All evaluators take the realized cap values ``h = H(omega)`` rather than
paths: the shortfall utility depends on the state only through ``H``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ValidationError

__all__ = [
    "Loss",
    "LinearLoss",
    "PowerLoss",
    "QuadraticLoss",
    "CallableLoss",
    "ConstantClaim",
    "CallClaim",
    "PutClaim",
    "StateUtility",
    "make_shortfall_utility",
    "convex_dual",
    "inverse_marginal",
    "parse_loss",
    "parse_claim",
]

_BISECTION_RTOL = 1e-12


class Loss:
    """Convex, strictly increasing loss with ``L(0) = 0``.

    Subclasses give closed forms; :meth:`inverse_derivative` returning
    ``None`` makes :class:`StateUtility` fall back to bisection.
    """

    name = "loss"

    def __call__(self, x):
        raise NotImplementedError

    def derivative(self, x):
        raise NotImplementedError

    def inverse_derivative(self, y):
        return None

    # cvxpy forms used by the exact tree programs
    def cvx(self, expr):
        raise NotImplementedError(f"{self.name} loss has no conic form")

    def cvx_dual_utility(self, eta, h):
        raise NotImplementedError(f"{self.name} loss has no conic dual form")

    def describe(self) -> str:
        return self.name


class LinearLoss(Loss):
    name = "linear"

    def __call__(self, x):
        return np.asarray(x, dtype=float) * 1.0

    def derivative(self, x):
        return np.ones_like(np.asarray(x, dtype=float))

    def cvx(self, expr):
        return expr

    def cvx_dual_utility(self, eta, h):
        import cvxpy as cp

        # sup_{0<=z<=h} z - eta z = h (1 - eta)^+
        return cp.multiply(h, cp.pos(1 - eta))


@dataclass(frozen=True)
class PowerLoss(Loss):
    """``L(x) = x**p`` with ``p > 1``."""

    p: float = 2.0

    def __post_init__(self):
        if not self.p > 1.0:
            raise ValidationError("power loss needs p > 1")

    @property
    def name(self):
        return "quadratic" if self.p == 2.0 else f"power({self.p:g})"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x > 0, np.abs(x) ** self.p, 0.0)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x > 0, self.p * np.abs(x) ** (self.p - 1.0), 0.0)

    def inverse_derivative(self, y):
        return (np.asarray(y, dtype=float) / self.p) ** (1.0 / (self.p - 1.0))

    def cvx(self, expr):
        import cvxpy as cp

        return cp.square(expr) if self.p == 2.0 else cp.power(expr, self.p)

    def cvx_dual_utility(self, eta, h):
        """``h^p - eta h + sup_{0<=x<=h}(eta x - x^p)`` written as an inf-convolution.

        The conjugate of ``x^p + 1_{[0,h]}`` is the inf-convolution of
        ``c (e^+)^q`` and ``h (.)^+`` with ``q = p/(p-1)``, ``c = (p-1) p^-q``.
        """
        import cvxpy as cp

        q = self.p / (self.p - 1.0)
        c = (self.p - 1.0) * self.p ** (-q)
        e = cp.Variable(eta.shape)
        pos_e = cp.pos(e)
        head = cp.square(pos_e) if q == 2.0 else cp.power(pos_e, q)
        return h ** self.p - cp.multiply(h, eta) + c * head + cp.multiply(h, cp.pos(eta - e))


def QuadraticLoss() -> PowerLoss:
    return PowerLoss(2.0)


class CallableLoss(Loss):
    """Wrap a user function; the derivative defaults to a left difference quotient."""

    name = "callable"

    def __init__(self, fn: Callable, derivative: Callable | None = None, step: float = 1e-7):
        self._fn = fn
        self._df = derivative
        self._step = step

    def __call__(self, x):
        return np.vectorize(self._fn, otypes=[float])(np.asarray(x, dtype=float))

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        if self._df is not None:
            return np.vectorize(self._df, otypes=[float])(x)
        h = self._step * np.maximum(1.0, np.abs(x))
        return (self(x) - self(x - h)) / h


# -- claims ---------------------------------------------------------------

@dataclass(frozen=True)
class ConstantClaim:
    c: float

    def __call__(self, s_T):
        return np.full(np.shape(s_T), float(self.c))

    def describe(self):
        return f"constant({self.c:g})"


@dataclass(frozen=True)
class CallClaim:
    K: float

    def __call__(self, s_T):
        return np.maximum(np.asarray(s_T, dtype=float) - self.K, 0.0)

    def describe(self):
        return f"call({self.K:g})"


@dataclass(frozen=True)
class PutClaim:
    K: float

    def __call__(self, s_T):
        return np.maximum(self.K - np.asarray(s_T, dtype=float), 0.0)

    def describe(self):
        return f"put({self.K:g})"


@dataclass(frozen=True)
class StateUtility:
    """Shortfall utility ``U(v) = L(H) - L((H - v)^+)`` with cap ``H = claim(S_T)``."""

    loss: Loss
    claim: Callable

    def cap(self, s_T) -> np.ndarray:
        h = np.asarray(self.claim(np.asarray(s_T, dtype=float)), dtype=float)
        if np.any(h < 0) or np.any(~np.isfinite(h)):
            raise ValidationError("the cap H must be finite and non-negative")
        return h

    def value(self, w, h):
        w, h = np.broadcast_arrays(np.asarray(w, float), np.asarray(h, float))
        return self.loss(h) - self.loss(np.maximum(h - w, 0.0))

    def marginal(self, w, h):
        """U'(w) = L'(H - w) on (0, H), zero at and beyond the cap."""
        w, h = np.broadcast_arrays(np.asarray(w, float), np.asarray(h, float))
        inside = w < h
        out = np.zeros(w.shape)
        out[inside] = self.loss.derivative((h - w)[inside])
        return out

    def inverse(self, y, h):
        """Generalized inverse ``inf{z in (0,H): U'(z) < y}`` capped at ``H``.

        ``y = 0`` maps to ``H``.
        """
        y, h = np.broadcast_arrays(np.asarray(y, float), np.asarray(h, float))
        out = np.array(h, dtype=float, copy=True)
        live = (h > 0) & (y > 0)
        if not np.any(live):
            return out
        yl, hl = y[live], h[live]
        x = self.loss.inverse_derivative(yl)
        if x is not None:
            # U'(z) < y  <=>  H - z < (L')^{-1}(y)
            out[live] = np.clip(hl - np.asarray(x, float), 0.0, hl)
        else:
            out[live] = self._bisect_inverse(yl, hl)
        return out

    def _bisect_inverse(self, y, h):
        d = self.loss.derivative
        lo = np.zeros_like(h)
        hi = h.copy()
        res = np.empty_like(h)
        # U'(0+) < y: every z qualifies; U'(H-) >= y: none does
        at_zero = d(h) < y
        none = d(np.zeros_like(h)) >= y
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            below = d(h - mid) < y
            hi = np.where(below, mid, hi)
            lo = np.where(below, lo, mid)
            if np.all(hi - lo <= _BISECTION_RTOL * np.maximum(h, 1e-300)):
                break
        res[:] = hi
        res[at_zero] = 0.0
        res[none & ~at_zero] = h[none & ~at_zero]
        return res

    def dual(self, y, h):
        """Convex dual ``sup_{0<=z<=H} U(z) - y z`` via its representation at ``I ^ H``."""
        y, h = np.broadcast_arrays(np.asarray(y, float), np.asarray(h, float))
        if np.any(y < 0):
            raise ValidationError("the dual variable must be non-negative")
        z = self.inverse(y, h)
        return self.value(z, h) - y * z

    def dual_derivative(self, y, h):
        return -self.inverse(y, h)

    def describe(self) -> dict:
        claim = self.claim.describe() if hasattr(self.claim, "describe") else repr(self.claim)
        return {"loss": self.loss.describe(), "claim": claim}


def _check_loss(loss: Loss, scale: float) -> None:
    grid = np.linspace(0.0, max(scale, 1.0) * 2.0, 201)
    vals = np.asarray(loss(grid), dtype=float)
    if abs(float(loss(np.array([0.0]))[0])) > 1e-12:
        raise ValidationError("the loss must vanish at 0")
    if np.any(np.diff(vals) <= 0):
        raise ValidationError("the loss must be strictly increasing")
    mid = 0.5 * (vals[:-2] + vals[2:])
    if np.any(vals[1:-1] > mid + 1e-12 * np.maximum(1.0, np.abs(mid))):
        raise ValidationError("the loss fails the secant convexity test")


def make_shortfall_utility(L, H, check_scale: float = 10.0) -> StateUtility:
    """Build the shortfall utility for loss ``L`` and claim ``H``.

    ``L`` may be a :class:`Loss` or a plain callable; ``H`` a callable of the
    terminal price or a non-negative number.  The loss is screened by a
    secant test on ``[0, 2 * check_scale]``.
    """
    loss = L if isinstance(L, Loss) else CallableLoss(L)
    claim = H if callable(H) else ConstantClaim(float(H))
    if not callable(H) and float(H) < 0:
        raise ValidationError("the cap H must be non-negative")
    _check_loss(loss, check_scale)
    return StateUtility(loss, claim)


def convex_dual(u: StateUtility, y, h):
    return u.dual(y, h)


def inverse_marginal(u: StateUtility, y, h):
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValidationError("inverse_marginal needs y > 0")
    return u.inverse(y, h)


def parse_loss(text: str) -> Loss:
    """``linear``, ``quadratic`` or ``power(p)``."""
    t = text.strip().lower()
    if t == "linear":
        return LinearLoss()
    if t == "quadratic":
        return PowerLoss(2.0)
    if t.startswith("power(") and t.endswith(")"):
        return PowerLoss(float(t[6:-1]))
    raise ValidationError(f"unknown loss {text!r}")


def parse_claim(text: str):
    """``constant(c)``, ``call(K)`` or ``put(K)``."""
    t = text.strip().lower()
    for prefix, cls in (("constant(", ConstantClaim), ("call(", CallClaim), ("put(", PutClaim)):
        if t.startswith(prefix) and t.endswith(")"):
            value = float(t[len(prefix):-1])
            if value < 0:
                raise ValidationError(f"claim parameter must be non-negative: {text!r}")
            return cls(value)
    raise ValidationError(f"unknown claim {text!r}")
