"""Inner products in L^2_H, Wiener integrals, and Monte Carlo identity checks.

Integrands are piecewise constant on the grid, so the double integral of the
kernel over each pair of cells has a closed form:

    int_a^b int_c^d h(2h-1)|t-s|^{2h-2} ds dt
        = (|b-c|^{2h} + |a-d|^{2h} - |b-d|^{2h} - |a-c|^{2h}) / 2,

which on a uniform grid only depends on the cell lag.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import toeplitz

from .errors import DomainError, GridMismatchError
from .fbm import FbmEnsemble, check_hurst, increment_autocovariance
from .grid import SampledFunction


def cell_kernel_matrix(n_steps: int, dt: float, h: float) -> np.ndarray:
    """Exact kernel mass of every pair of grid cells."""
    return toeplitz(increment_autocovariance(np.arange(n_steps), dt, h))


def h_inner(f: SampledFunction, g: SampledFunction, h: float) -> float:
    h = check_hurst(h)
    f.grid.check_same(g.grid)
    fv, gv = f.cell_values, g.cell_values
    if not (np.all(np.isfinite(fv)) and np.all(np.isfinite(gv))):
        raise DomainError("non-finite integrand")
    gamma = cell_kernel_matrix(f.grid.n_steps, f.grid.dt, h)
    return float(fv @ gamma @ gv)


def h_norm_sq(f: SampledFunction, h: float) -> float:
    return max(h_inner(f, f, h), 0.0)


def wiener_integral(f: SampledFunction, path: np.ndarray, grid=None):
    """Sum_k f_k (B_{t_{k+1}} - B_{t_k}) for one path or a stack of paths."""
    if grid is not None:
        f.grid.check_same(grid)
    path = np.asarray(path, dtype=float)
    if path.shape[-1] != f.grid.n_steps + 1:
        raise GridMismatchError(f"path has {path.shape[-1]} nodes, integrand grid has {f.grid.n_steps + 1}")
    out = np.diff(path, axis=-1) @ f.cell_values
    return float(out) if np.ndim(out) == 0 else out


def wiener_integrals(f: SampledFunction, ensemble: FbmEnsemble) -> np.ndarray:
    f.grid.check_same(ensemble.grid)
    return wiener_integral(f, ensemble.values)


@dataclass
class IdentityReport:
    quantity: str
    mc_estimate: float
    analytic: float
    std_error: float
    z: float
    passed: bool

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def z_score(estimate: float, target: float, std_error: float, atol: float = 1e-13) -> float:
    diff = estimate - target
    if std_error > 0:
        return diff / std_error
    return 0.0 if abs(diff) <= atol * max(1.0, abs(target)) else float(np.sign(diff) * np.inf)


def _report(quantity, estimate, analytic, se, tol_sigmas) -> IdentityReport:
    z = z_score(estimate, analytic, se)
    return IdentityReport(quantity, float(estimate), float(analytic), float(se), float(z), bool(abs(z) <= tol_sigmas))


def check_isometry(
    f: SampledFunction, ensemble: FbmEnsemble, tol_sigmas: float = 4.0, analytic: float | None = None
) -> IdentityReport:
    """Compare the sample variance of int f dB^H with ||f||_H^2.

    The mean is known to be zero, so the estimator is mean(W^2) and its
    standard error comes from the sample fourth moment.
    """
    w = wiener_integrals(f, ensemble)
    sq = w * w
    est = sq.mean()
    se = sq.std(ddof=1) / np.sqrt(len(sq)) if len(sq) > 1 else 0.0
    if analytic is None:
        analytic = h_norm_sq(f, ensemble.h)
    return _report("isometry", est, analytic, se, tol_sigmas)


def check_ibp_deterministic(
    g1: SampledFunction, g2: SampledFunction, ensemble: FbmEnsemble, tol_sigmas: float = 4.0
) -> IdentityReport:
    """E[X_T Y_T] against <g1, g2>_H for pure-noise X, Y started at zero."""
    x = wiener_integrals(g1, ensemble)
    y = wiener_integrals(g2, ensemble)
    prod = x * y
    est = prod.mean()
    se = prod.std(ddof=1) / np.sqrt(len(prod)) if len(prod) > 1 else 0.0
    return _report("integration_by_parts", est, h_inner(g1, g2, ensemble.h), se, tol_sigmas)
