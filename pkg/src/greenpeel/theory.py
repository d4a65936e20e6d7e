"""Closed-form overlays: the sample budget curve and the failure-probability bound."""

from __future__ import annotations

import math

from scipy.optimize import brentq


def n_theory(eps: float, gamma: float = 1.0, c0: float = 1.0) -> float:
    """c0 * log(1/eps)^5 * (log log(1/eps) + log(1/gamma))^4.

    ``c0`` is a fitting constant chosen by the caller.
    """
    if not 0 < eps < math.exp(-1):
        raise ValueError(f"eps must lie in (0, 1/e), got {eps}")
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if c0 <= 0:
        raise ValueError("c0 must be positive")
    ell = math.log(1.0 / eps)
    return c0 * ell**5 * (math.log(ell) + math.log(1.0 / gamma)) ** 4


def failure_bound(eps: float) -> float:
    """exp(-log(1/eps)^3), the bound on the failure probability."""
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    return math.exp(-math.log(1.0 / eps) ** 3)


def log10_failure_bound(eps: float) -> float:
    """log10 of :func:`failure_bound`, usable where the bound underflows."""
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    return -math.log(1.0 / eps) ** 3 / math.log(10.0)


def eps_for_budget(n: float, gamma: float = 1.0, c0: float = 1.0) -> float:
    """Invert n_theory in eps for a given budget (monotone, so a bracketed root)."""
    lo, hi = 1e-300, math.exp(-1) * (1 - 1e-12)
    if n <= n_theory(hi, gamma, c0):
        return hi
    f = lambda logeps: n_theory(math.exp(logeps), gamma, c0) - n
    return math.exp(brentq(f, math.log(lo), math.log(hi), xtol=1e-12))
