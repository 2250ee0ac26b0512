"""Fractional Brownian motion on a uniform grid.

Two samplers share one distributional contract: a dense Cholesky factor of
the covariance over the interior nodes (trusted, O(n^3)) and circulant
embedding of fractional Gaussian noise (fast, O(n log n) per path).

Every path i draws its normals from its own Philox stream keyed by the seed
with the path index in the counter, so path i does not depend on n_paths or
on the order in which paths are produced.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from typing import Literal

import numpy as np
from scipy.linalg import lapack

from .errors import DiagonalSingularityError, DomainError, FactorizationError, NegativeEigenvalueError
from .grid import TimeGrid

_MASK64 = (1 << 64) - 1


def check_hurst(h: float) -> float:
    h = float(h)
    if not 0.5 < h < 1.0:
        raise DomainError(f"Hurst parameter must satisfy 1/2 < h < 1, got {h}")
    return h


def kernel_phi(t, s, h: float):
    """h(2h-1)|t-s|^{2h-2}; singular on the diagonal."""
    h = check_hurst(h)
    d = np.abs(np.asarray(t, dtype=float) - np.asarray(s, dtype=float))
    if np.any(d == 0):
        raise DiagonalSingularityError("kernel diverges at t = s; integrate across the diagonal analytically")
    out = h * (2 * h - 1) * d ** (2 * h - 2)
    return float(out) if np.ndim(out) == 0 else out


def covariance(t, s, h: float):
    """E[B_t B_s] = (t^{2h} + s^{2h} - |t-s|^{2h}) / 2."""
    h = check_hurst(h)
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(t < 0) or np.any(s < 0):
        raise DomainError("covariance is defined for nonnegative times")
    two_h = 2 * h
    out = 0.5 * (t**two_h + s**two_h - np.abs(t - s) ** two_h)
    return float(out) if np.ndim(out) == 0 else out


def covariance_matrix(grid: TimeGrid, h: float) -> np.ndarray:
    """Covariance over the interior nodes t_1..t_n (node 0 is pinned to zero)."""
    t = grid.nodes[1:]
    return covariance(t[:, None], t[None, :], h)


def increment_autocovariance(lags: np.ndarray, dt: float, h: float) -> np.ndarray:
    """Covariance of fGn increments of width dt at integer lags."""
    k = np.abs(np.asarray(lags, dtype=float))
    two_h = 2 * h
    return 0.5 * dt**two_h * ((k + 1) ** two_h - 2 * k**two_h + np.abs(k - 1) ** two_h)


@dataclass(frozen=True, eq=False)
class FbmEnsemble:
    """n_paths sample paths of B^H on ``grid``; ``values[:, 0] == 0``."""

    grid: TimeGrid
    h: float
    n_paths: int
    values: np.ndarray
    seed: int
    method: str = "cholesky"

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=1)

    def to_csv(self, path) -> None:
        """Dump as ``path_id,t,value`` rows, path-major."""
        t = self.grid.nodes
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path_id", "t", "value"])
            for i, row in enumerate(self.values):
                for tk, v in zip(t, row):
                    w.writerow([i, repr(float(tk)), repr(float(v))])


def path_generator(seed: int, path_index: int) -> np.random.Generator:
    """Counter-based substream for one path."""
    seed = int(seed) & ((1 << 128) - 1)
    return np.random.Generator(
        np.random.Philox(key=[seed & _MASK64, seed >> 64], counter=[0, 0, path_index, 0])
    )


def _standard_normals(seed: int, n_paths: int, width: int) -> np.ndarray:
    z = np.empty((n_paths, width))
    for i in range(n_paths):
        z[i] = path_generator(seed, i).standard_normal(width)
    return z


def _check_sampler_args(grid: TimeGrid, n_paths: int) -> None:
    if grid.n_steps < 1:
        raise DomainError("need at least one step")
    if int(n_paths) != n_paths or n_paths < 1:
        raise DomainError(f"n_paths must be a positive integer, got {n_paths}")


@lru_cache(maxsize=32)
def _cholesky_factor(t_end: float, n_steps: int, h: float) -> np.ndarray:
    c = covariance_matrix(TimeGrid(t_end, n_steps), h)
    lower, info = lapack.dpotrf(c, lower=1, clean=1)
    if info > 0:
        raise FactorizationError(int(info) - 1)
    if info < 0:
        raise FactorizationError(-1, f"dpotrf rejected argument {-info}")
    lower.setflags(write=False)
    return lower


def cholesky_factor(grid: TimeGrid, h: float) -> np.ndarray:
    """Lower Cholesky factor of the interior-node covariance matrix."""
    return _cholesky_factor(grid.t_end, grid.n_steps, check_hurst(h))


def sample_cholesky(grid: TimeGrid, h: float, n_paths: int, seed: int) -> FbmEnsemble:
    h = check_hurst(h)
    _check_sampler_args(grid, n_paths)
    lower = cholesky_factor(grid, h)
    z = _standard_normals(seed, n_paths, grid.n_steps)
    values = np.zeros((n_paths, grid.n_steps + 1))
    values[:, 1:] = z @ lower.T
    values.setflags(write=False)
    return FbmEnsemble(grid, h, int(n_paths), values, int(seed), "cholesky")


@lru_cache(maxsize=32)
def _circulant_sqrt_eigs(dt: float, n_steps: int, h: float) -> np.ndarray:
    n = n_steps
    gamma = increment_autocovariance(np.arange(n + 1), dt, h)
    row = np.concatenate([gamma, gamma[n - 1:0:-1]])
    eig = np.fft.fft(row).real
    tol = 1e-12 * np.abs(eig).max()
    if eig.min() < -tol:
        raise NegativeEigenvalueError(float(eig.min()))
    out = np.sqrt(np.clip(eig, 0.0, None) / (2 * n))
    out.setflags(write=False)
    return out


def sample_circulant(grid: TimeGrid, h: float, n_paths: int, seed: int) -> FbmEnsemble:
    h = check_hurst(h)
    _check_sampler_args(grid, n_paths)
    n = grid.n_steps
    m = 2 * n
    root = _circulant_sqrt_eigs(grid.dt, n, h)
    z = _standard_normals(seed, n_paths, 2 * m)
    w = root * (z[:, :m] + 1j * z[:, m:])
    incr = np.fft.fft(w, axis=1)[:, :n].real
    values = np.zeros((n_paths, n + 1))
    np.cumsum(incr, axis=1, out=values[:, 1:])
    values.setflags(write=False)
    return FbmEnsemble(grid, h, int(n_paths), values, int(seed), "circulant")


def sample(
    grid: TimeGrid, h: float, n_paths: int, seed: int, method: Literal["auto", "cholesky", "circulant"] = "auto"
) -> FbmEnsemble:
    """Dispatch to a sampler; ``auto`` uses Cholesky below 256 steps."""
    if method == "auto":
        method = "cholesky" if grid.n_steps < 256 else "circulant"
    if method == "cholesky":
        return sample_cholesky(grid, h, n_paths, seed)
    if method == "circulant":
        return sample_circulant(grid, h, n_paths, seed)
    raise DomainError(f"unknown sampler {method!r}")
