"""Convex-duality solver for capped utility maximization in finite-activity Levy markets."""

__version__ = "0.1.0"
