"""Particle simulation of the delayed mean-field state equation and its first variation.

The extended grid covers [-delay, T] with the same step as the noise grid;
column ``j`` of a path array holds the node t = (j - m) dt where m is the
number of steps per delay. Moments are taken over the whole ensemble once per
step, before any particle is advanced.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .errors import AdmissibilityError, BlowUpError, DomainError
from .fbm import FbmEnsemble
from .grid import TimeGrid, TimeFunctionLike, time_function
from .meanfield import IDENTITY, ScalarMomentFn, diffusion_fn, drift_fn


@dataclass(frozen=True)
class DelayedDynamics:
    """dX = b_hat(t, X, X(t-delay), v1, v2, u) dt + sigma_hat(t, w1, w2) dB^H.

    v1/w1 are moments of the law at t, v2/w2 at t - delay, through the moment
    maps attached to ``drift`` and ``diffusion``.
    """

    drift: ScalarMomentFn
    diffusion: ScalarMomentFn
    delay: float
    horizon: float
    x0: TimeFunctionLike = 0.0

    def __post_init__(self):
        if not self.delay > 0:
            raise DomainError(f"delay must be positive, got {self.delay}")
        if not self.horizon > 0:
            raise DomainError(f"horizon must be positive, got {self.horizon}")
        if set(self.diffusion.args) != {"t", "v1", "v2"}:
            raise DomainError("the diffusion may only depend on (t, v1, v2)")

    def delay_steps(self, grid: TimeGrid) -> int:
        return grid.steps_for(self.delay)

    def initial_segment(self, grid: TimeGrid) -> np.ndarray:
        m = self.delay_steps(grid)
        t = (np.arange(m + 1) - m) * grid.dt
        vals = np.broadcast_to(np.asarray(time_function(self.x0)(t), dtype=float), t.shape)
        if not np.all(np.isfinite(vals)):
            raise DomainError("initial segment must be finite")
        return np.array(vals)


def _clip(vals, lower, upper):
    if lower is None and upper is None:
        return vals
    return np.clip(vals, -np.inf if lower is None else lower, np.inf if upper is None else upper)


@dataclass(frozen=True, eq=False)
class OpenLoop:
    """Control given by node values, shared (n+1,) or per particle (N, n+1)."""

    values: np.ndarray
    lower: float | None = None
    upper: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    def at(self, k, t, x, xbar, v1, v2):
        return _clip(self.values[..., k], self.lower, self.upper)

    def realized(self, n_paths: int, n_nodes: int) -> np.ndarray:
        if self.values.shape[-1] != n_nodes:
            raise DomainError(f"control has {self.values.shape[-1]} nodes, grid has {n_nodes}")
        return np.broadcast_to(_clip(self.values, self.lower, self.upper), (n_paths, n_nodes))

    def shifted(self, theta: float, direction) -> "OpenLoop":
        return OpenLoop(self.values + theta * np.asarray(direction, dtype=float), self.lower, self.upper)


@dataclass(frozen=True, eq=False)
class Feedback:
    """Control u = fn(t, x, xbar, v1, v2) using only time-t information."""

    fn: Callable
    lower: float | None = None
    upper: float | None = None

    def at(self, k, t, x, xbar, v1, v2):
        return _clip(np.asarray(self.fn(t, x, xbar, v1, v2), dtype=float), self.lower, self.upper)


ControlPolicy = Union[OpenLoop, Feedback]


@dataclass(frozen=True, eq=False)
class ParticlePaths:
    """N trajectories on [-delay, T] plus the realized controls on [0, T]."""

    grid: TimeGrid
    delay_steps: int
    x: np.ndarray
    u: np.ndarray
    noise: FbmEnsemble | None = field(default=None, repr=False)

    @property
    def n_paths(self) -> int:
        return self.x.shape[0]

    @property
    def times(self) -> np.ndarray:
        return (np.arange(self.x.shape[1]) - self.delay_steps) * self.grid.dt

    def at(self, k: int) -> np.ndarray:
        """State at node t_k (k = 0..n), shape (N,)."""
        return self.x[:, self.delay_steps + k]

    def delayed(self, k: int) -> np.ndarray:
        """State at t_k - delay."""
        return self.x[:, k]

    @property
    def on_horizon(self) -> np.ndarray:
        return self.x[:, self.delay_steps:]

    @property
    def terminal(self) -> np.ndarray:
        return self.x[:, -1]

    def moment_trace(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(t, mean, unbiased variance) over the extended grid."""
        var = self.x.var(axis=0, ddof=1) if self.n_paths > 1 else np.zeros(self.x.shape[1])
        return self.times, self.x.mean(axis=0), var

    def to_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["particle_id", "t", "x"])
            t = self.times
            for i, row in enumerate(self.x):
                for tk, v in zip(t, row):
                    w.writerow([i, repr(float(tk)), repr(float(v))])

    def moments_to_csv(self, path, header: str | None = None) -> None:
        t, mean, var = self.moment_trace()
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "mean", "var"])
            for row in zip(t, mean, var):
                w.writerow([repr(float(v)) for v in row])


def _moment(psi, x) -> float:
    return float(np.mean(psi(x)))


def _check_finite(x_next: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x_next)):
        raise BlowUpError(int(np.flatnonzero(~np.isfinite(x_next))[0]), step)


def _bcast(a, n):
    return np.broadcast_to(np.asarray(a, dtype=float), (n,))


def simulate(dyn: DelayedDynamics, u: ControlPolicy, noise: FbmEnsemble) -> ParticlePaths:
    """Explicit Euler scheme driven by the fBm increments of ``noise``."""
    grid = noise.grid
    if not np.isclose(grid.t_end, dyn.horizon, rtol=1e-12, atol=0.0):
        raise DomainError(f"noise horizon {grid.t_end} differs from dynamics horizon {dyn.horizon}")
    m = dyn.delay_steps(grid)
    n, N, dt = grid.n_steps, noise.n_paths, grid.dt
    x = np.empty((N, m + n + 1))
    x[:, : m + 1] = dyn.initial_segment(grid)
    uu = np.empty((N, n + 1))
    dB = noise.increments
    b, s = dyn.drift, dyn.diffusion
    psi1, psi2 = b.moments.get("v1", IDENTITY), b.moments.get("v2", IDENTITY)
    phi1, phi2 = s.moments.get("v1", IDENTITY), s.moments.get("v2", IDENTITY)
    for k in range(n + 1):
        t = k * dt
        xk, xd = x[:, m + k], x[:, k]
        v1, v2 = _moment(psi1, xk), _moment(psi2, xd)
        uu[:, k] = _bcast(u.at(k, t, xk, xd, v1, v2), N)
        if k == n:
            break
        drift = _bcast(b(t=t, x=xk, xbar=xd, v1=v1, v2=v2, u=uu[:, k]), N)
        sig = float(np.asarray(s(t=t, v1=_moment(phi1, xk), v2=_moment(phi2, xd))))
        x_next = xk + drift * dt + sig * dB[:, k]
        _check_finite(x_next, k)
        x[:, m + k + 1] = x_next
    x.setflags(write=False)
    uu.setflags(write=False)
    return ParticlePaths(grid, m, x, uu, noise)


def simulate_variation(
    dyn: DelayedDynamics, u_star: ControlPolicy, direction: ControlPolicy, base: ParticlePaths
) -> ParticlePaths:
    """Euler scheme for the first variation Y in the direction ``direction``.

    ``base`` must come from ``simulate(dyn, u_star, noise)``; u_star enters
    through the controls realized along ``base``. Mean-field terms are
    ensemble averages, e.g. E~[d_m b(X~) Y~] = d_{v1} b_hat * mean_j psi1'(X_j) Y_j.
    The returned object stores Y in ``x`` and the direction in ``u``.
    """
    if base.noise is None:
        raise DomainError("base paths carry no noise ensemble")
    grid, m = base.grid, base.delay_steps
    if m != dyn.delay_steps(grid):
        raise DomainError("base paths were simulated with a different delay")
    n, N, dt = grid.n_steps, base.n_paths, grid.dt
    dB = base.noise.increments
    b, s = dyn.drift, dyn.diffusion
    psi1, psi2 = b.moments.get("v1", IDENTITY), b.moments.get("v2", IDENTITY)
    phi1, phi2 = s.moments.get("v1", IDENTITY), s.moments.get("v2", IDENTITY)
    y = np.zeros((N, m + n + 1))
    vv = np.empty((N, n + 1))
    for k in range(n + 1):
        t = k * dt
        xk, xd = base.at(k), base.delayed(k)
        v1, v2 = _moment(psi1, xk), _moment(psi2, xd)
        vv[:, k] = _bcast(direction.at(k, t, xk, xd, v1, v2), N)
        if k == n:
            break
        yk, yd = y[:, m + k], y[:, k]
        args = dict(t=t, x=xk, xbar=xd, v1=v1, v2=v2, u=base.u[:, k])
        drift = (
            _bcast(b.partial("x", **args), N) * yk
            + _bcast(b.partial("xbar", **args), N) * yd
            + _bcast(b.partial("v1", **args), N) * np.mean(psi1.derivative(xk) * yk)
            + _bcast(b.partial("v2", **args), N) * np.mean(psi2.derivative(xd) * yd)
            + _bcast(b.partial("u", **args), N) * vv[:, k]
        )
        sargs = dict(t=t, v1=_moment(phi1, xk), v2=_moment(phi2, xd))
        psi_delta = float(s.partial("v1", **sargs)) * np.mean(phi1.derivative(xk) * yk) + float(
            s.partial("v2", **sargs)
        ) * np.mean(phi2.derivative(xd) * yd)
        y_next = yk + drift * dt + psi_delta * dB[:, k]
        _check_finite(y_next, k)
        y[:, m + k + 1] = y_next
    y.setflags(write=False)
    return ParticlePaths(grid, m, y, vv, base.noise)


def zero_noise(grid: TimeGrid, n_paths: int = 1, h: float = 0.75) -> FbmEnsemble:
    """A degenerate ensemble with B^H == 0, for deterministic runs."""
    v = np.zeros((n_paths, grid.n_steps + 1))
    v.setflags(write=False)
    return FbmEnsemble(grid, h, n_paths, v, 0, "zero")


def constant_diffusion(beta: TimeFunctionLike) -> ScalarMomentFn:
    """sigma_hat(t, v1, v2) = beta(t), with vanishing moment derivatives."""
    f = time_function(beta)
    zero = lambda t, v1, v2: 0.0  # noqa: E731
    return diffusion_fn(lambda t, v1, v2: f(t), partials={"v1": zero, "v2": zero})


def cash_flow_dynamics(delay: float, horizon: float, beta: TimeFunctionLike = 0.0, x0: TimeFunctionLike = 1.0):
    """dX = (X(t-delay) - rho) dt + beta(t) dB^H."""
    zero = lambda t, x, xb, v1, v2, u: 0.0  # noqa: E731
    b = drift_fn(
        lambda t, x, xb, v1, v2, u: xb - u,
        partials={
            "x": zero,
            "xbar": lambda *a: 1.0,
            "v1": zero,
            "v2": zero,
            "u": lambda *a: -1.0,
        },
    )
    return DelayedDynamics(b, constant_diffusion(beta), delay, horizon, x0)


def lq_dynamics(
    delay: float, horizon: float, beta1: TimeFunctionLike, beta2: TimeFunctionLike, x0: TimeFunctionLike = 0.0
):
    """dX = (beta1(t) X(t-delay) + alpha) dt + beta2(t) dB^H."""
    b1 = time_function(beta1)
    zero = lambda t, x, xb, v1, v2, u: 0.0  # noqa: E731
    b = drift_fn(
        lambda t, x, xb, v1, v2, u: b1(t) * xb + u,
        partials={
            "x": zero,
            "xbar": lambda t, *a: b1(t),
            "v1": zero,
            "v2": zero,
            "u": lambda *a: 1.0,
        },
    )
    return DelayedDynamics(b, constant_diffusion(beta2), delay, horizon, x0)


def check_admissible(u: np.ndarray, lower: float | None, strict: bool = False) -> None:
    if lower is None:
        return
    bad = u <= lower if strict else u < lower
    if np.any(bad):
        raise AdmissibilityError(f"control leaves the admissible set (min value {float(np.min(u)):.3e})")
