"""Independent reference solutions used by the tests.

Everything here is built from sympy (exact rational arithmetic) or from plain
Monte Carlo without touching the package internals.
"""

from __future__ import annotations

import numpy as np
import sympy as sp

t = sp.Symbol("t", real=True)
s = sp.Symbol("s", real=True)


def adjoint_pieces(T, delta, xi, c):
    """Exact p(t) for p' = -c p(t + delta) 1{t <= T - delta}, p(T) = xi.

    Returns a list of (lo, hi, expr) with rational bounds, latest segment first.
    """
    T, delta, xi, c = map(sp.nsimplify, (T, delta, xi, c))
    pieces = [(sp.Max(T - delta, 0), T, sp.Integer(1) * xi)]
    while pieces[-1][0] > 0:
        lo_prev, hi_prev, expr_prev = pieces[-1]
        hi = lo_prev
        lo = sp.Max(hi - delta, 0)
        shifted = expr_prev.subs(t, s + delta)
        expr = expr_prev.subs(t, hi) + sp.integrate(c * shifted, (s, t, hi))
        pieces.append((lo, hi, sp.expand(expr)))
    return pieces


def adjoint_value(pieces, tau: float) -> float:
    for lo, hi, expr in pieces:
        if float(lo) - 1e-15 <= tau <= float(hi) + 1e-15:
            return float(expr.subs(t, sp.nsimplify(tau)))
    raise ValueError(tau)


def delay_ode_pieces(delta, t_end, x0, forcing):
    """Method of steps for x'(t) = x(t - delta) + forcing, x = x0 on [-delta, 0]."""
    delta, t_end, x0, forcing = map(sp.nsimplify, (delta, t_end, x0, forcing))
    pieces = [(-delta, sp.Integer(0), sp.Integer(1) * x0)]
    while pieces[-1][1] < t_end:
        lo_prev, hi_prev, expr_prev = pieces[-1]
        lo, hi = hi_prev, hi_prev + delta
        rhs = expr_prev.subs(t, s - delta) + forcing
        start = expr_prev.subs(t, lo)
        pieces.append((lo, hi, sp.expand(start + sp.integrate(rhs, (s, lo, t)))))
    return pieces


def piecewise_eval(pieces, tau: float) -> float:
    for lo, hi, expr in pieces:
        if float(lo) - 1e-15 <= tau <= float(hi) + 1e-15:
            return float(expr.subs(t, sp.nsimplify(tau)))
    raise ValueError(tau)


def h_norm_sq_mc(cell_values: np.ndarray, t_end: float, h: float, n: int, seed: int):
    """Importance-sampled Monte Carlo of the double kernel integral.

    s ~ U(0, T), r = |t - s| drawn with density proportional to r^(2h-2) on
    (0, T), sign of t - s uniform. The weight is then bounded:
    2 h T^(2h) f(s) f(t) 1{0 <= t < T}.
    """
    rng = np.random.default_rng(seed)
    s_ = rng.uniform(0.0, t_end, n)
    r = t_end * rng.uniform(size=n) ** (1.0 / (2 * h - 1))
    t_ = s_ + np.where(rng.uniform(size=n) < 0.5, -r, r)
    inside = (t_ >= 0) & (t_ < t_end)
    ncell = cell_values.size
    fs = cell_values[np.minimum((s_ / t_end * ncell).astype(int), ncell - 1)]
    ft = np.zeros(n)
    ft[inside] = cell_values[np.minimum((t_[inside] / t_end * ncell).astype(int), ncell - 1)]
    w = 2 * h * t_end ** (2 * h) * fs * ft
    return float(w.mean()), float(w.std(ddof=1) / np.sqrt(n))
