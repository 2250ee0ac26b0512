"""Performance functionals, optimal controls of the two applications, and
numerical checks of the maximum principle.

All Monte Carlo comparisons between controls reuse one noise ensemble
(common random numbers) and report standard errors of per-particle paired
differences.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import adjoint as adj
from .errors import AdmissibilityError, DomainError, NonConvergenceError, OptimalityConditionError
from .fbm import FbmEnsemble, check_hurst
from .fcalc import z_score
from .grid import SampledFunction, TimeFunctionLike, TimeGrid
from .meanfield import IDENTITY, EmpiricalMeasure, ScalarMomentFn, drift_fn, moment, terminal_fn
from .sdde import (
    DelayedDynamics,
    OpenLoop,
    ParticlePaths,
    cash_flow_dynamics,
    lq_dynamics,
    simulate,
    simulate_variation,
)

# Absolute floor used when every per-particle contribution is identical and the
# standard error collapses to rounding level.
DETERMINISTIC_ATOL = 1e-10


def _se(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0


# ---------------------------------------------------------------------------
# Hamiltonian
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HamiltonianSpec:
    f_hat: ScalarMomentFn
    b_hat: ScalarMomentFn
    sigma_hat: ScalarMomentFn


def _as_moment(m, psi) -> float:
    if m is None:
        return 0.0
    if isinstance(m, EmpiricalMeasure):
        return moment(m, psi)
    return float(m)


def q_weight(q: SampledFunction, h: float, t: float) -> float:
    """int_0^T q(s) phi_H(s, t) ds for piecewise-constant q, cell by cell in closed form."""
    h = check_hurst(h)
    edges = q.grid.nodes
    d = t - edges
    g = np.sign(d) * np.abs(d) ** (2 * h - 1)
    return float(h * np.sum(q.cell_values * (g[:-1] - g[1:])))


def hamiltonian(spec: HamiltonianSpec, t, x, x_bar, m, m_bar, u, p, q_weight: float = 0.0):
    """f_hat + p b_hat + sigma_hat * q_weight, moments taken from m (at t) and m_bar (at t - delay)."""
    f, b, s = spec.f_hat, spec.b_hat, spec.sigma_hat
    fv = f(t=t, x=x, xbar=x_bar, v1=_as_moment(m, f.moments["v1"]), v2=_as_moment(m_bar, f.moments["v2"]), u=u)
    bv = b(t=t, x=x, xbar=x_bar, v1=_as_moment(m, b.moments["v1"]), v2=_as_moment(m_bar, b.moments["v2"]), u=u)
    out = np.asarray(fv) + np.asarray(p) * np.asarray(bv)
    if q_weight:
        sv = s(t=t, v1=_as_moment(m, s.moments["v1"]), v2=_as_moment(m_bar, s.moments["v2"]))
        out = out + np.asarray(sv) * q_weight
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Performance functional
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostFunctional:
    """J(u) = E[g_hat(X_T, (gamma3, M_T)) + int_0^T f_hat(...) dt].

    ``control_lower`` is a strict lower bound of the admissible set checked
    before evaluation. ``unbiased_terminal`` rescales the terminal
    contributions by N/(N-1), which turns the empirical variance of a centred
    quadratic terminal cost into the unbiased one.
    """

    running: ScalarMomentFn
    terminal: ScalarMomentFn
    control_lower: float | None = None
    unbiased_terminal: bool = False

    def running_contributions(self, paths: ParticlePaths) -> np.ndarray:
        f = self.running
        g1, g2 = f.moments.get("v1", IDENTITY), f.moments.get("v2", IDENTITY)
        grid, n, N = paths.grid, paths.grid.n_steps, paths.n_paths
        total = np.zeros(N)
        for k in range(n):
            xk, xd = paths.at(k), paths.delayed(k)
            val = f(t=k * grid.dt, x=xk, xbar=xd, v1=float(np.mean(g1(xk))), v2=float(np.mean(g2(xd))), u=paths.u[:, k])
            total += np.broadcast_to(val, (N,))
        return total * grid.dt

    def terminal_scale(self, n_paths: int) -> float:
        return n_paths / (n_paths - 1) if self.unbiased_terminal and n_paths > 1 else 1.0

    def terminal_contributions(self, paths: ParticlePaths) -> np.ndarray:
        """Per-particle terminal terms whose mean is g; the influence correction makes
        their spread carry the Monte Carlo error of the law-dependent part."""
        g = self.terminal
        gamma3 = g.moments["v"]
        x = paths.terminal
        v = float(np.mean(gamma3(x)))
        base = np.broadcast_to(np.asarray(g(x=x, v=v), dtype=float), x.shape)
        dv = float(np.mean(np.broadcast_to(g.partial("v", x=x, v=v), x.shape)))
        corr = dv * (gamma3(x) - v)
        return (base + corr) * self.terminal_scale(x.size)

    def check(self, paths: ParticlePaths) -> None:
        if self.control_lower is not None and np.any(paths.u[:, :-1] <= self.control_lower):
            raise AdmissibilityError(
                f"control must stay above {self.control_lower} (min {float(paths.u[:, :-1].min()):.3e})"
            )


@dataclass
class PerformanceReport:
    J: float
    std_error: float
    n_paths: int
    running: float
    terminal: float
    contributions: np.ndarray = field(repr=False, compare=False, default=None)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "contributions"}


def performance(cost: CostFunctional, paths: ParticlePaths) -> PerformanceReport:
    cost.check(paths)
    run = cost.running_contributions(paths)
    term = cost.terminal_contributions(paths)
    c = run + term
    return PerformanceReport(float(np.mean(c)), _se(c), paths.n_paths, float(np.mean(run)), float(np.mean(term)), c)


def evaluate_J(dyn: DelayedDynamics, u, cost: CostFunctional, noise: FbmEnsemble) -> PerformanceReport:
    return performance(cost, simulate(dyn, u, noise))


class _Checked:
    """Raise on non-positive consumption before taking the log."""

    def __init__(self):
        self.__name__ = "log_utility"

    def __call__(self, t, x, xb, v1, v2, u):
        u = np.asarray(u, dtype=float)
        if np.any(u <= 0):
            raise AdmissibilityError("log utility needs a strictly positive consumption rate")
        return np.log(u)


def consumption_cost(xi1: float) -> CostFunctional:
    """f_hat = log(rho), g_hat(x, v) = xi1 v with v = E[X_T]."""
    zero = lambda *a: 0.0  # noqa: E731
    f = drift_fn(_Checked(), partials={"x": zero, "xbar": zero, "v1": zero, "v2": zero, "u": lambda t, x, xb, v1, v2, u: 1.0 / u})
    g = terminal_fn(lambda x, v: xi1 * v + 0.0 * x, partials={"x": lambda x, v: 0.0, "v": lambda x, v: xi1})
    return CostFunctional(f, g, control_lower=0.0)


def lq_cost() -> CostFunctional:
    """f_hat = -alpha^2/2, g_hat(x, v) = -(x - v)^2 / 2 with unbiased variance."""
    zero = lambda *a: 0.0  # noqa: E731
    f = drift_fn(
        lambda t, x, xb, v1, v2, u: -0.5 * u * u,
        partials={"x": zero, "xbar": zero, "v1": zero, "v2": zero, "u": lambda t, x, xb, v1, v2, u: -u},
    )
    g = terminal_fn(
        lambda x, v: -0.5 * (x - v) ** 2,
        partials={"x": lambda x, v: -(x - v), "v": lambda x, v: x - v},
    )
    return CostFunctional(f, g, unbiased_terminal=True)


# ---------------------------------------------------------------------------
# Applications
# ---------------------------------------------------------------------------


def _check_horizon(t_end: float, noise: FbmEnsemble) -> None:
    if not np.isclose(t_end, noise.grid.t_end, rtol=1e-12, atol=0.0):
        raise DomainError(f"horizon {t_end} differs from the noise grid horizon {noise.grid.t_end}")


class ConsumptionSolution(NamedTuple):
    policy: OpenLoop
    adjoint: adj.BsdeSolution
    performance: PerformanceReport
    paths: ParticlePaths


def solve_consumption(
    t_end: float,
    delay: float,
    xi1: float | adj.Constant,
    beta: TimeFunctionLike,
    x0: TimeFunctionLike,
    noise: FbmEnsemble,
) -> ConsumptionSolution:
    """rho* = 1/p with p the deterministic adjoint for terminal value xi1."""
    _check_horizon(t_end, noise)
    xi = xi1.value if isinstance(xi1, adj.Constant) else float(xi1)
    if not xi > 0:
        raise DomainError(f"xi1 must be positive, got {xi}")
    sol = adj.solve_deterministic(noise.grid, delay, adj.Constant(xi), 1.0)
    if np.any(sol.p <= 0):
        raise OptimalityConditionError(f"adjoint not positive (min {float(sol.p.min()):.3e}); rho* = 1/p undefined")
    policy = OpenLoop(1.0 / sol.p, lower=None)
    dyn = cash_flow_dynamics(delay, t_end, beta, x0)
    paths = simulate(dyn, policy, noise)
    return ConsumptionSolution(policy, sol, performance(consumption_cost(xi), paths), paths)


class LqSolution(NamedTuple):
    policy: OpenLoop
    adjoint: adj.BsdeSolution
    performance: PerformanceReport
    iterations: int
    residual: float
    residual_std_error: float
    history: list
    paths: ParticlePaths


def solve_lq_picard(
    t_end: float,
    delay: float,
    beta1: TimeFunctionLike,
    beta2: TimeFunctionLike,
    x0: TimeFunctionLike,
    noise: FbmEnsemble,
    damping: float = 0.5,
    tol: float = 1e-3,
    max_iter: int = 50,
    basis_cfg: adj.BasisConfig = adj.BasisConfig(),
    alpha0: np.ndarray | None = None,
) -> LqSolution:
    """Damped fixed-point iteration alpha <- (1-d) alpha + d p[alpha].

    Controls are per-particle open-loop paths. Stops when the largest
    node-wise root-mean-square update is at most ``tol`` and returns the
    current iterate with the adjoint evaluated along it.
    """
    _check_horizon(t_end, noise)
    if not 0 < damping <= 1:
        raise DomainError(f"damping must lie in (0, 1], got {damping}")
    grid = noise.grid
    dyn = lq_dynamics(delay, t_end, beta1, beta2, x0)
    cost = lq_cost()
    shape = (noise.n_paths, grid.n_steps + 1)
    alpha = np.zeros(shape) if alpha0 is None else np.broadcast_to(np.asarray(alpha0, dtype=float), shape).copy()
    history = []
    for it in range(1, max_iter + 1):
        paths = simulate(dyn, OpenLoop(alpha), noise)
        sol = adj.solve_lsmc(delay, adj.CenteredState(), beta1, paths, noise, basis_cfg)
        step = damping * (sol.p - alpha)
        rms = float(np.sqrt(np.max(np.mean(step * step, axis=0))))
        history.append({"iteration": it, "rms_update": rms, "J": performance(cost, paths).J})
        if rms <= tol:
            gap = np.abs(alpha - sol.p)
            p_se = float(np.mean(np.std(sol.p, axis=0, ddof=1)) / np.sqrt(noise.n_paths))
            alpha.setflags(write=False)
            return LqSolution(
                OpenLoop(alpha), sol, performance(cost, paths), it, float(gap.mean()), p_se, history, paths
            )
        alpha = alpha + step
    raise NonConvergenceError([h["rms_update"] for h in history])


# ---------------------------------------------------------------------------
# Maximum-principle checks
# ---------------------------------------------------------------------------


@dataclass
class MpReport:
    kind: str
    rows: list[dict]
    passed: bool
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "pass": self.passed, "rows": self.rows, "summary": self.summary}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self, path, header: str | None = None) -> None:
        """Dominance table as ``direction,theta,J,dJ,stderr,pass``."""
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["direction", "theta", "J", "dJ", "stderr", "pass"])
            for r in self.rows:
                w.writerow([r["direction"], repr(r["theta"]), repr(r["J"]), repr(r["dJ"]), repr(r["stderr"]), int(r["pass"])])


def _realized(policy, paths_or_shape) -> np.ndarray:
    N, nodes = paths_or_shape
    if isinstance(policy, OpenLoop):
        return np.asarray(policy.realized(N, nodes))
    raise DomainError("perturbations must be open-loop controls")


def hamiltonian_u_gradient(dyn: DelayedDynamics, cost: CostFunctional, paths: ParticlePaths, p: np.ndarray) -> np.ndarray:
    """d_u H along the paths, shape (N, n): d_u f_hat + p d_u b_hat."""
    b, f = dyn.drift, cost.running
    n, N, dt = paths.grid.n_steps, paths.n_paths, paths.grid.dt
    p = np.broadcast_to(p, (N, n + 1))
    out = np.empty((N, n))
    for k in range(n):
        xk, xd = paths.at(k), paths.delayed(k)
        fa = dict(t=k * dt, x=xk, xbar=xd, v1=moment(EmpiricalMeasure(xk), f.moments["v1"]),
                  v2=moment(EmpiricalMeasure(xd), f.moments["v2"]), u=paths.u[:, k])
        ba = dict(fa, v1=moment(EmpiricalMeasure(xk), b.moments["v1"]), v2=moment(EmpiricalMeasure(xd), b.moments["v2"]))
        out[:, k] = np.broadcast_to(f.partial("u", **fa), (N,)) + p[:, k] * np.broadcast_to(b.partial("u", **ba), (N,))
    return out


def verify_necessary(
    dyn: DelayedDynamics,
    cost: CostFunctional,
    u_star: OpenLoop,
    perturbations: Mapping[str, OpenLoop],
    p_solution: adj.BsdeSolution,
    noise: FbmEnsemble,
    atol: float = DETERMINISTIC_ATOL,
) -> MpReport:
    """G(u) = E[int d_u H* (u - u*) dt] for every perturbation u.

    ``pass`` follows the inequality G <= 2 stderr; ``summary['stationary']``
    records the stronger |G| <= 2 stderr + atol that holds at interior optima.
    """
    paths = simulate(dyn, u_star, noise)
    grad = hamiltonian_u_gradient(dyn, cost, paths, p_solution.p)
    n, dt = paths.grid.n_steps, paths.grid.dt
    rows = []
    for name, u in perturbations.items():
        du = _realized(u, (paths.n_paths, n + 1))[:, :n] - paths.u[:, :n]
        contrib = np.sum(grad * du, axis=1) * dt
        g, se = float(np.mean(contrib)), _se(contrib)
        rows.append({
            "perturbation": name,
            "G": g,
            "stderr": se,
            "z": z_score(g, 0.0, se, atol),
            "pass": bool(g <= 2 * se + atol),
            "stationary": bool(abs(g) <= 2 * se + atol),
        })
    return MpReport(
        "necessary",
        rows,
        all(r["pass"] for r in rows),
        {"stationary": all(r["stationary"] for r in rows), "max_abs_gradient": float(np.max(np.abs(grad)))},
    )


def default_directions(grid: TimeGrid) -> dict[str, np.ndarray]:
    t = grid.nodes
    T = grid.t_end
    base = {"1": np.ones_like(t), "t": t.copy(), "sin": np.sin(2 * np.pi * t / T)}
    out = {}
    for name, v in base.items():
        out["+" + name] = v
        out["-" + name] = -v
    return out


DEFAULT_THETAS = (0.05, 0.1, 0.2)


def verify_dominance(
    dyn: DelayedDynamics,
    cost: CostFunctional,
    u_star: OpenLoop,
    directions: Mapping[str, np.ndarray] | None,
    noise: FbmEnsemble,
    thetas: Sequence[float] = DEFAULT_THETAS,
    atol: float = 1e-12,
) -> MpReport:
    """Table of dJ = J(u* + theta v) - J(u*) with paired standard errors."""
    if directions is None:
        directions = default_directions(noise.grid)
    ref = evaluate_J(dyn, u_star, cost, noise)
    rows = []
    slopes = {}
    for name, v in directions.items():
        djs = []
        for th in thetas:
            rep = evaluate_J(dyn, u_star.shifted(th, v), cost, noise)
            diff = rep.contributions - ref.contributions
            dj, se = float(np.mean(diff)), _se(diff)
            djs.append(dj)
            rows.append({"direction": name, "theta": float(th), "J": rep.J, "dJ": dj, "stderr": se,
                         "pass": bool(dj <= 2 * se + atol)})
        pos = [(th, -d) for th, d in zip(thetas, djs) if th > 0 and d < 0]
        if len(pos) >= 2:
            slopes[name] = float(np.polyfit(np.log([a for a, _ in pos]), np.log([b for _, b in pos]), 1)[0])
        else:
            slopes[name] = None
    return MpReport("dominance", rows, all(r["pass"] for r in rows), {"J_star": ref.J, "J_star_stderr": ref.std_error, "slopes": slopes})


def gateaux_formula(
    dyn: DelayedDynamics, cost: CostFunctional, base: ParticlePaths, var: ParticlePaths
) -> np.ndarray:
    """Per-particle contributions to the directional derivative of J written with Y."""
    f, g = cost.running, cost.terminal
    g1, g2 = f.moments["v1"], f.moments["v2"]
    gamma3 = g.moments["v"]
    n, N, dt = base.grid.n_steps, base.n_paths, base.grid.dt
    bc = lambda a: np.broadcast_to(np.asarray(a, dtype=float), (N,))  # noqa: E731
    run = np.zeros(N)
    for k in range(n):
        xk, xd = base.at(k), base.delayed(k)
        yk, yd = var.at(k), var.delayed(k)
        a = dict(t=k * dt, x=xk, xbar=xd, v1=float(np.mean(g1(xk))), v2=float(np.mean(g2(xd))), u=base.u[:, k])
        run += (
            bc(f.partial("x", **a)) * yk
            + bc(f.partial("xbar", **a)) * yd
            + np.mean(bc(f.partial("v1", **a))) * g1.derivative(xk) * yk
            + np.mean(bc(f.partial("v2", **a))) * g2.derivative(xd) * yd
            + bc(f.partial("u", **a)) * var.u[:, k]
        )
    run *= dt
    xT, yT = base.terminal, var.terminal
    v = float(np.mean(gamma3(xT)))
    term = bc(g.partial("x", x=xT, v=v)) * yT + np.mean(bc(g.partial("v", x=xT, v=v))) * gamma3.derivative(xT) * yT
    return run + term * cost.terminal_scale(N)


def gateaux_check(
    dyn: DelayedDynamics,
    cost: CostFunctional,
    u_star: OpenLoop,
    v,
    noise: FbmEnsemble,
    thetas: Sequence[float] = (1e-1, 1e-2, 1e-3),
    rel_tol: float = 0.05,
    zero_sigmas: float = 2.0,
) -> MpReport:
    """Finite differences of J against the variation-process formula.

    Passes if the relative error at the smallest theta is within ``rel_tol``,
    or if the difference is within ``zero_sigmas`` standard errors of the
    formula's Monte Carlo estimate.
    """
    v = np.asarray(v, dtype=float)
    base = simulate(dyn, u_star, noise)
    ref = performance(cost, base)
    var = simulate_variation(dyn, u_star, OpenLoop(v), base)
    contrib = gateaux_formula(dyn, cost, base, var)
    formula, se = float(np.mean(contrib)), _se(contrib)
    rows = []
    for th in thetas:
        rep = evaluate_J(dyn, u_star.shifted(th, v), cost, noise)
        fd = float(np.mean(rep.contributions - ref.contributions)) / th
        err = abs(fd - formula)
        rows.append({"theta": float(th), "fd": fd, "formula": formula, "abs_error": err,
                     "rel_error": err / abs(formula) if formula != 0 else (0.0 if err == 0 else float("inf"))})
    last = rows[-1]
    passed = last["rel_error"] <= rel_tol or last["abs_error"] <= zero_sigmas * se + DETERMINISTIC_ATOL
    return MpReport("gateaux", rows, bool(passed), {"formula": formula, "stderr": se})
