"""Backward solvers for the time-advanced adjoint equation

    dp(t) = -c(t + delay) E[p(t + delay) 1{t <= T - delay} | F_t] dt + q(t) dB^H(t).

On [T - delay, T] the drift vanishes; each earlier segment only needs p on
the segment after it, so the equation is solved one delay-segment at a time.
For deterministic terminal data p is deterministic, q = 0 and the recursion
is an exact polynomial integration. For a centred terminal state the
conditional expectations are least-squares projections on polynomial
features of (X(t), X(t - delay), B^H(t)).
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
from numpy.polynomial import Polynomial
from scipy.linalg import qr

from .errors import DomainError, RankDeficientRegressionError
from .fbm import FbmEnsemble
from .grid import TimeFunctionLike, TimeGrid, sample_on
from .sdde import ParticlePaths


@dataclass(frozen=True)
class SegmentGrid:
    """Delay-segments [max(T-(j+1)delay, 0), T - j delay], listed earliest first."""

    t_end: float
    delay: float
    segments: tuple[tuple[float, float], ...]

    @property
    def n(self) -> int:
        return len(self.segments)


def segment_grid(t_end: float, delay: float) -> SegmentGrid:
    if not (t_end > 0 and delay > 0):
        raise DomainError("horizon and delay must be positive")
    n = max(1, math.ceil(t_end / delay - 1e-9))
    segs = []
    for j in range(n):
        lo = max(t_end - (j + 1) * delay, 0.0)
        hi = t_end - j * delay
        segs.append((0.0 if lo < 1e-12 * t_end else lo, hi))
    return SegmentGrid(float(t_end), float(delay), tuple(reversed(segs)))


@dataclass(frozen=True)
class Constant:
    value: float


@dataclass(frozen=True)
class DeterministicFn:
    """Deterministic terminal value computed from the grid."""

    fn: Callable[[TimeGrid], float]


@dataclass(frozen=True)
class CenteredState:
    """p_i(T) = -scale (X_i(T) - mean_j X_j(T))."""

    scale: float = 1.0

    def values(self, x_terminal: np.ndarray) -> np.ndarray:
        # shift by one sample first so an ensemble of equal states gives exact zeros
        c = x_terminal - x_terminal[0]
        return -self.scale * (c - np.mean(c))


TerminalCondition = Union[Constant, DeterministicFn, CenteredState]


@dataclass(eq=False)
class BsdeSolution:
    """Adjoint values on the grid nodes.

    ``p`` has shape (n+1,) when deterministic and (N, n+1) per particle; ``q``
    is None when not computed.
    """

    grid: TimeGrid
    delay: float
    p: np.ndarray
    q: np.ndarray | None
    method: str
    segments: SegmentGrid
    diagnostics: list[dict] = field(default_factory=list)
    pieces: list[Polynomial] | None = field(default=None, repr=False)

    @property
    def deterministic(self) -> bool:
        return self.p.ndim == 1

    def p_at(self, t):
        """Exact evaluation between nodes (deterministic solver only)."""
        if self.pieces is None:
            raise DomainError("pointwise evaluation needs the polynomial pieces of the deterministic solver")
        t = np.asarray(t, dtype=float)
        dt = self.grid.dt
        k = np.clip(np.floor(t / dt).astype(int), 0, self.grid.n_steps - 1)
        out = np.array([self.pieces[ki](ti - ki * dt) for ki, ti in zip(np.ravel(k), np.ravel(t))])
        return float(out[0]) if t.ndim == 0 else out.reshape(t.shape)

    def mean_path(self) -> np.ndarray:
        return self.p if self.deterministic else self.p.mean(axis=0)

    def to_csv(self, path, header: str | None = None) -> None:
        t = self.grid.nodes
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header + "\n")
            w = csv.writer(fh, lineterminator="\n")
            if self.deterministic:
                w.writerow(["t", "p"])
                for tk, v in zip(t, self.p):
                    w.writerow([repr(float(tk)), repr(float(v))])
            else:
                w.writerow(["particle_id", "t", "p"])
                for i, row in enumerate(self.p):
                    for tk, v in zip(t, row):
                        w.writerow([i, repr(float(tk)), repr(float(v))])

    def diagnostics_json(self) -> str:
        return json.dumps({"method": self.method, "nodes": self.diagnostics}, sort_keys=True)


def _terminal_constant(xi, grid: TimeGrid) -> float:
    if isinstance(xi, Constant):
        return float(xi.value)
    if isinstance(xi, DeterministicFn):
        return float(xi.fn(grid))
    if isinstance(xi, (int, float)):
        return float(xi)
    raise DomainError(f"deterministic solver needs deterministic terminal data, got {type(xi).__name__}")


def _delay_steps(grid: TimeGrid, delay: float) -> int | None:
    """Steps per delay, or None when the delay reaches past the horizon."""
    if delay >= grid.t_end * (1 - 1e-12):
        return None
    return grid.steps_for(delay)


def solve_deterministic(
    grid: TimeGrid, delay: float, xi: Constant | DeterministicFn | float, coeff: TimeFunctionLike = 1.0
) -> BsdeSolution:
    """Exact segment recursion p(t) = p(t_{k+1}) + int_t^{t_{k+1}} c(s+delay) p(s+delay) ds.

    ``coeff`` is read as piecewise constant on the grid cells, so p is a
    polynomial on every cell; pieces are stored in the local variable s - t_k.
    """
    c = _terminal_constant(xi, grid)
    segs = segment_grid(grid.t_end, delay)
    n, dt = grid.n_steps, grid.dt
    m = _delay_steps(grid, delay)
    cv = sample_on(grid, coeff).cell_values
    pieces: list[Polynomial | None] = [None] * n
    right = c
    for k in range(n - 1, -1, -1):
        if m is None or k + m >= n:
            piece = Polynomial([right])
        else:
            # int_tau^dt c P_{k+m}(s) ds, with the antiderivative vanishing at tau = dt
            anti = (cv[k + m] * pieces[k + m]).integ()
            piece = Polynomial([right + anti(dt)]) - anti
        pieces[k] = piece
        right = float(piece(0.0))
    p = np.array([pc(0.0) for pc in pieces] + [c])
    p.setflags(write=False)
    q = np.zeros(n + 1)
    return BsdeSolution(grid, float(delay), p, q, "deterministic", segs, [], pieces)  # type: ignore[arg-type]


@dataclass(frozen=True)
class BasisConfig:
    degree: int = 2
    ridge: float = 1e-8
    min_samples_per_basis: int = 10
    max_condition: float = 1e12


def polynomial_features(z: np.ndarray, degree: int) -> np.ndarray:
    """All monomials of total degree 1..degree in the columns of z."""
    cols = []
    d = z.shape[1]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), deg):
            cols.append(np.prod(z[:, combo], axis=1))
    return np.column_stack(cols) if cols else np.empty((z.shape[0], 0))


def project(features: np.ndarray, target: np.ndarray, cfg: BasisConfig = BasisConfig(), node: int = -1):
    """Ridge least-squares projection of ``target`` on polynomial features plus intercept.

    Constant and exactly collinear feature columns are dropped (column-pivoted
    QR) before solving; the intercept is not penalized, so the fitted values
    have the same mean as the target.
    """
    n_obs = target.shape[0]
    phi = polynomial_features(features, cfg.degree)
    ybar = float(np.mean(target))
    yc = target - ybar
    diag = {"node": node, "n_basis": 1, "r2": 0.0, "cond": 1.0, "dropped": int(phi.shape[1])}
    if phi.shape[1]:
        mu = phi.mean(axis=0)
        sd = phi.std(axis=0)
        live = sd > 1e-12 * (1.0 + np.abs(mu))
        zc = (phi[:, live] - mu[live]) / sd[live]
    else:
        zc = phi
    if zc.shape[1]:
        _, r, piv = qr(zc, mode="economic", pivoting=True)
        rd = np.abs(np.diag(r))
        rank = int(np.sum(rd > 1e-8 * rd[0]))
        zc = zc[:, np.sort(piv[:rank])]
    p_dim = zc.shape[1] + 1
    if n_obs < cfg.min_samples_per_basis * p_dim:
        raise DomainError(f"need at least {cfg.min_samples_per_basis * p_dim} particles for {p_dim} basis functions")
    if zc.shape[1] == 0:
        fitted = np.full(n_obs, ybar)
    else:
        gram = zc.T @ zc / n_obs + cfg.ridge * np.eye(zc.shape[1])
        cond = float(np.linalg.cond(gram))
        if not np.isfinite(cond) or cond > cfg.max_condition:
            raise RankDeficientRegressionError(node, cond)
        coef = np.linalg.solve(gram, zc.T @ yc / n_obs)
        fitted = ybar + zc @ coef
        ss = float(yc @ yc)
        resid = target - fitted
        diag.update(
            n_basis=p_dim,
            cond=cond,
            dropped=int(phi.shape[1] - zc.shape[1]),
            r2=1.0 - float(resid @ resid) / ss if ss > 0 else 1.0,
        )
    return fitted, diag


def solve_lsmc(
    delay: float,
    terminal: CenteredState,
    coeff: TimeFunctionLike,
    features: ParticlePaths,
    noise: FbmEnsemble,
    basis_cfg: BasisConfig = BasisConfig(),
    multistep: bool = True,
) -> BsdeSolution:
    """Backward regression pass, one projection per node; q is not computed.

    With ``multistep`` the target at t_k is anchored at the terminal value,

        p_i(t_k) = Proj_k[ p_i(T) + dt sum_{j >= k} c(t_j + delay) p_i(t_j + delay) 1{t_j <= T - delay} ],

    so projection errors do not compound: the features at t_k do not span the
    non-Markov past of B^H, and regressing the fitted p(t_{k+1}) again would
    bias the result. Otherwise the one-step target p_i(t_{k+1}) + dt c p_i(t_k + delay)
    is used. Proj_k regresses on features of particle i at t_k.
    """
    grid = features.grid
    grid.check_same(noise.grid)
    if features.n_paths != noise.n_paths:
        raise DomainError("feature paths and noise ensemble have different sizes")
    segs = segment_grid(grid.t_end, delay)
    n, dt = grid.n_steps, grid.dt
    m = _delay_steps(grid, delay)
    cv = sample_on(grid, coeff).values
    p = np.empty((features.n_paths, n + 1))
    p[:, n] = terminal.values(features.terminal)
    diags = []
    running = p[:, n].copy()
    for k in range(n - 1, -1, -1):
        drift = dt * cv[k + m] * p[:, k + m] if m is not None and k + m <= n else 0.0
        if multistep:
            running = running + drift
            target = running
        else:
            target = p[:, k + 1] + drift
        z = np.column_stack([features.at(k), features.delayed(k), noise.values[:, k]])
        p[:, k], d = project(z, target, basis_cfg, node=k)
        d["t"] = k * dt
        diags.append(d)
    p.setflags(write=False)
    diags.reverse()
    return BsdeSolution(grid, float(delay), p, None, "lsmc", segs, diags)
