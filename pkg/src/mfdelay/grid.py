"""Uniform time grids and grid-sampled deterministic functions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .errors import DomainError, GridMismatchError

# Relative tolerance used when checking that a length is an integer multiple of dt.
ALIGN_RTOL = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    """Nodes t_k = k * dt, k = 0..n_steps, on [0, t_end]."""

    t_end: float
    n_steps: int

    def __post_init__(self):
        if not (np.isfinite(self.t_end) and self.t_end > 0):
            raise DomainError(f"t_end must be positive, got {self.t_end}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise DomainError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "t_end", float(self.t_end))

    @property
    def dt(self) -> float:
        return self.t_end / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def steps_for(self, length: float) -> int:
        """Number of grid steps spanning ``length``; raises if not grid-aligned."""
        k = length / self.dt
        kr = int(round(k))
        if kr < 1 or abs(k - kr) > ALIGN_RTOL * max(1.0, k):
            raise DomainError(f"length {length} is not a positive multiple of dt={self.dt}")
        return kr

    def index_of(self, t: float) -> int:
        """Index of the node equal to ``t`` (within rounding)."""
        k = t / self.dt
        kr = int(round(k))
        if kr < 0 or kr > self.n_steps or abs(k - kr) > ALIGN_RTOL * max(1.0, k):
            raise DomainError(f"t={t} is not a node of the grid")
        return kr

    def check_same(self, other: "TimeGrid") -> None:
        if self.n_steps != other.n_steps or not np.isclose(self.t_end, other.t_end, rtol=1e-12, atol=0.0):
            raise GridMismatchError(f"grid mismatch: {self} vs {other}")

    @classmethod
    def from_delay(cls, t_end: float, delay: float, steps_per_delay: int) -> "TimeGrid":
        """Grid with dt = delay / steps_per_delay; t_end must be a multiple of dt."""
        if delay <= 0:
            raise DomainError(f"delay must be positive, got {delay}")
        dt = delay / steps_per_delay
        n = t_end / dt
        nr = int(round(n))
        if nr < 1 or abs(n - nr) > ALIGN_RTOL * max(1.0, n):
            raise DomainError(f"horizon {t_end} is not a multiple of dt = {delay}/{steps_per_delay}")
        return cls(t_end, nr)


@dataclass(frozen=True)
class SampledFunction:
    """Deterministic function given by node values, read as piecewise constant.

    The value on [t_k, t_{k+1}) is ``values[k]``; the last entry is the value
    at t_end and is only used by pointwise evaluation.
    """

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n_steps + 1,):
            raise DomainError(f"expected {self.grid.n_steps + 1} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DomainError("sampled function has non-finite values")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_callable(cls, grid: TimeGrid, fn: Callable[[np.ndarray], np.ndarray]) -> "SampledFunction":
        return cls(grid, np.broadcast_to(np.asarray(fn(grid.nodes), dtype=float), (grid.n_steps + 1,)))

    @classmethod
    def constant(cls, grid: TimeGrid, c: float) -> "SampledFunction":
        return cls(grid, np.full(grid.n_steps + 1, float(c)))

    @classmethod
    def indicator(cls, grid: TimeGrid, lo: float, hi: float) -> "SampledFunction":
        """1 on cells [t_k, t_{k+1}) contained in [lo, hi), else 0."""
        t = grid.nodes
        eps = ALIGN_RTOL * grid.dt
        return cls(grid, ((t >= lo - eps) & (t < hi - eps)).astype(float))

    @property
    def cell_values(self) -> np.ndarray:
        """Values on the n_steps cells."""
        return self.values[:-1]

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        k = np.clip(np.floor(t / self.grid.dt + ALIGN_RTOL).astype(int), 0, self.grid.n_steps)
        return self.values[k]


TimeFunctionLike = Union[float, int, Callable[[np.ndarray], np.ndarray], SampledFunction]


def time_function(f: TimeFunctionLike) -> Callable:
    """Normalize a constant / callable / sampled function into a callable of t."""
    if isinstance(f, SampledFunction):
        return f
    if callable(f):
        return f
    c = float(f)
    return lambda t: np.full(np.shape(t), c) if np.ndim(t) else c


def sample_on(grid: TimeGrid, f: TimeFunctionLike) -> SampledFunction:
    if isinstance(f, SampledFunction):
        grid.check_same(f.grid)
        return f
    if callable(f):
        return SampledFunction.from_callable(grid, f)
    return SampledFunction.constant(grid, float(f))
