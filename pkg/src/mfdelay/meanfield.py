"""Empirical laws, scalar-moment functionals and their measure derivatives.

A coefficient such as b(t, x, xbar, m, mbar, u) is represented through scalar
moments, b = b_hat(t, x, xbar, (psi1, m), (psi2, mbar), u). Its derivative
with respect to the measure is then the chain rule

    d_m b(...)(x') = d_{v1} b_hat(...) * psi1'(x').
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .errors import DomainError, NonDifferentiableError

FD_REL_STEP = 1e-6


def _fd_step(x) -> np.ndarray:
    return FD_REL_STEP * (1.0 + np.abs(x))


@dataclass(frozen=True)
class MomentMap:
    """A scalar function psi with its derivative (central differences if omitted)."""

    fn: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = ""

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.deriv is not None:
            return np.broadcast_to(self.deriv(x), x.shape).astype(float)
        step = _fd_step(x)
        return (self.fn(x + step) - self.fn(x - step)) / (2 * step)


IDENTITY = MomentMap(lambda x: x, lambda x: np.ones_like(x), "id")
SQUARE = MomentMap(lambda x: x * x, lambda x: 2 * x, "square")


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Uniformly weighted sample set."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.atleast_1d(np.asarray(self.samples, dtype=float))
        if s.ndim != 1 or s.size < 1:
            raise DomainError("an empirical measure needs a non-empty 1-D sample array")
        object.__setattr__(self, "samples", s)

    @property
    def size(self) -> int:
        return self.samples.size


def moment(m: EmpiricalMeasure, psi: Callable = IDENTITY) -> float:
    """(psi, m) = (1/N) sum psi(x_i)."""
    vals = np.broadcast_to(np.asarray(psi(m.samples), dtype=float), m.samples.shape)
    return float(np.mean(vals))


@dataclass(frozen=True)
class ScalarMomentFn:
    """A hat-function of named arguments, some of which are scalar moments.

    ``args`` lists the positional argument names of ``hat``; ``moments`` maps
    the names of the moment arguments to their moment maps. Analytic partial
    derivatives may be supplied in ``partials`` (same signature as ``hat``);
    missing ones are taken by central differences with step 1e-6 (1 + |a|).
    """

    hat: Callable[..., Any]
    args: tuple[str, ...]
    moments: Mapping[str, MomentMap] = field(default_factory=dict)
    partials: Mapping[str, Callable[..., Any]] = field(default_factory=dict)

    def __post_init__(self):
        unknown = (set(self.moments) | set(self.partials)) - set(self.args)
        if unknown:
            raise DomainError(f"unknown argument names {sorted(unknown)}")

    def _ordered(self, kw: Mapping[str, Any]) -> list:
        try:
            return [kw[a] for a in self.args]
        except KeyError as exc:
            raise DomainError(f"missing argument {exc.args[0]!r}") from None

    def __call__(self, **kw):
        return self.hat(*self._ordered(kw))

    def partial(self, name: str, **kw):
        if name not in self.args:
            raise DomainError(f"{name!r} is not an argument")
        if name in self.partials:
            out = self.partials[name](*self._ordered(kw))
        else:
            a = np.asarray(kw[name], dtype=float)
            step = _fd_step(a)
            up = dict(kw, **{name: a + step})
            dn = dict(kw, **{name: a - step})
            out = (np.asarray(self(**up)) - np.asarray(self(**dn))) / (2 * step)
        out = np.asarray(out, dtype=float)
        if not np.all(np.isfinite(out)):
            raise NonDifferentiableError(f"derivative in {name!r} is not finite at the evaluation point")
        return out

    def moments_of(self, **measures: EmpiricalMeasure) -> dict[str, float]:
        """Evaluate the moment arguments from measures keyed by argument name."""
        return {name: moment(measures[name], psi) for name, psi in self.moments.items() if name in measures}


def drift_fn(hat, psi1: MomentMap = IDENTITY, psi2: MomentMap = IDENTITY, partials=None) -> ScalarMomentFn:
    """b_hat(t, x, xbar, v1, v2, u) (also used for running costs f_hat)."""
    return ScalarMomentFn(hat, ("t", "x", "xbar", "v1", "v2", "u"), {"v1": psi1, "v2": psi2}, partials or {})


def diffusion_fn(hat, phi1: MomentMap = IDENTITY, phi2: MomentMap = IDENTITY, partials=None) -> ScalarMomentFn:
    """sigma_hat(t, v1, v2): deterministic, independent of x, xbar and u."""
    return ScalarMomentFn(hat, ("t", "v1", "v2"), {"v1": phi1, "v2": phi2}, partials or {})


def terminal_fn(hat, gamma3: MomentMap = IDENTITY, partials=None) -> ScalarMomentFn:
    """g_hat(x, v) with v = (gamma3, M(T))."""
    return ScalarMomentFn(hat, ("x", "v"), {"v": gamma3}, partials or {})


@dataclass(frozen=True)
class MeasureDerivative:
    """x' -> outer * psi'(x')."""

    outer: Any
    moment_map: MomentMap

    def __call__(self, x_prime):
        x_prime = np.asarray(x_prime, dtype=float)
        outer = np.asarray(self.outer, dtype=float)
        if outer.ndim == 0:
            return outer * self.moment_map.derivative(x_prime)
        # one outer value per evaluation point of the functional
        return outer[..., None] * self.moment_map.derivative(x_prime)

    def __add__(self, other: "MeasureDerivative") -> "_SumDerivative":
        return _SumDerivative((self, other))

    def scaled(self, c: float) -> "MeasureDerivative":
        return MeasureDerivative(np.asarray(self.outer) * c, self.moment_map)


@dataclass(frozen=True)
class _SumDerivative:
    terms: tuple

    def __call__(self, x_prime):
        return sum(t(x_prime) for t in self.terms)

    def __add__(self, other):
        return _SumDerivative(self.terms + (other,))


def measure_derivative(
    F: ScalarMomentFn, m: EmpiricalMeasure, eval_args: Mapping[str, Any] | None = None, wrt: str | None = None
) -> MeasureDerivative:
    """Derivative of m -> F(..., v=(psi, m), ...) with respect to the measure.

    ``wrt`` names the moment argument fed by ``m`` (defaults to the only one);
    the remaining arguments come from ``eval_args``.
    """
    if wrt is None:
        if len(F.moments) != 1:
            raise DomainError("several moment arguments; pass wrt")
        (wrt,) = F.moments
    psi = F.moments[wrt]
    kw = dict(eval_args or {})
    kw[wrt] = moment(m, psi)
    return MeasureDerivative(F.partial(wrt, **kw), psi)


def functional_value(F: ScalarMomentFn, m: EmpiricalMeasure, eval_args=None, wrt: str | None = None) -> float:
    if wrt is None:
        (wrt,) = F.moments
    kw = dict(eval_args or {})
    kw[wrt] = moment(m, F.moments[wrt])
    return float(np.asarray(F(**kw)))


@dataclass
class LiftingReport:
    eps: list[float]
    residuals: list[float]
    slope: float | None
    exact: bool
    passed: bool


def lifting_check(
    F: ScalarMomentFn,
    m0: EmpiricalMeasure,
    direction: Sequence[float],
    eps: Sequence[float] = (1e-2, 1e-3, 1e-4),
    eval_args=None,
    wrt: str | None = None,
    min_slope: float = 1.9,
) -> LiftingReport:
    """First-order Taylor test of the measure derivative along x_i + eps d_i."""
    d = np.asarray(direction, dtype=float)
    if d.shape != m0.samples.shape:
        raise DomainError("direction must have one entry per sample")
    dm = measure_derivative(F, m0, eval_args, wrt)
    f0 = functional_value(F, m0, eval_args, wrt)
    slope_at = np.mean(dm(m0.samples) * d)
    residuals = []
    for e in eps:
        m = EmpiricalMeasure(m0.samples + e * d)
        residuals.append(abs(functional_value(F, m, eval_args, wrt) - f0 - e * slope_at))
    scale = max(1.0, abs(f0))
    exact = all(r <= 1e-12 * scale for r in residuals)
    slope = None
    good = [(e, r) for e, r in zip(eps, residuals) if e > 0 and r > 0]
    if len(good) >= 2:
        le, lr = np.log([g[0] for g in good]), np.log([g[1] for g in good])
        slope = float(np.polyfit(le, lr, 1)[0])
    passed = exact or (slope is not None and slope >= min_slope)
    return LiftingReport(list(map(float, eps)), [float(r) for r in residuals], slope, exact, passed)


def wasserstein2(m: EmpiricalMeasure, m2: EmpiricalMeasure) -> float:
    """W_2 between equal-size uniform empirical measures (sorted coupling)."""
    if m.size != m2.size:
        raise DomainError(f"sample sizes differ ({m.size} vs {m2.size})")
    a = np.sort(m.samples)
    b = np.sort(m2.samples)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def concavity_gap(
    G: ScalarMomentFn, x: float, m: EmpiricalMeasure, x2: float, m2: EmpiricalMeasure
) -> float:
    """G(x2,m2) - G(x,m) - d_x G (x2-x) - mean_i d_m G(x,m)(x_i)(x2_i - x_i).

    The samples of ``m`` and ``m2`` are paired index by index. Nonpositive for
    every pair iff G is concave in (x, m) along these couplings.
    """
    if m.size != m2.size:
        raise DomainError("paired measures must have equal size")
    v = moment(m, G.moments["v"])
    v2 = moment(m2, G.moments["v"])
    dx = float(G.partial("x", x=x, v=v))
    dm = measure_derivative(G, m, {"x": x})
    lin = dx * (x2 - x) + float(np.mean(dm(m.samples) * (m2.samples - m.samples)))
    return float(G(x=x2, v=v2)) - float(G(x=x, v=v)) - lin


def terminal_adjoint(g: ScalarMomentFn, x_terminal: np.ndarray) -> np.ndarray:
    """p(T) = d_x g_hat(X, v) + mean_j[d_v g_hat(X_j, v)] * gamma3'(X), v = (gamma3, M(T)).

    Every tilde-expectation is an average over the same ensemble.
    """
    x = np.asarray(x_terminal, dtype=float)
    gamma3 = g.moments["v"]
    v = moment(EmpiricalMeasure(x), gamma3)
    dx = np.broadcast_to(g.partial("x", x=x, v=v), x.shape)
    dv = np.broadcast_to(g.partial("v", x=x, v=v), x.shape)
    return dx + np.mean(dv) * gamma3.derivative(x)
