"""Batch scenario runner.

    mfdelay run scenario.cfg --out results/ [--seed N] [--quiet]

The config is flat ``key = value`` text (``#`` comments) or an equivalent JSON
object; nested JSON sections such as ``{"picard": {"damping": 0.5}}`` map to
``picard_damping``. Exit codes: 0 all gates pass, 1 a gate failed, 2 invalid
config, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from . import adjoint as adj
from . import control, fbm, fcalc, sdde
from .errors import MfDelayError
from .grid import SampledFunction, TimeGrid

SCENARIOS = ("fbm-stats", "isometry", "consumption", "lq", "verify")

EXIT_OK, EXIT_GATE, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    h: float = 0.75
    t_end: float = 1.0
    delta: float = 0.4
    n_steps_per_delay: int = 20
    n_paths: int = 20000
    seed: int = 42
    sampler: str = "auto"
    tol_sigmas: float = 4.0
    xi1: float = 1.0
    beta: str = "0"
    beta1: str = "0.5"
    beta2: str = "1"
    x0: float = 1.0
    problem: str = "consumption"
    picard_damping: float = 0.5
    picard_tol: float = 1e-3
    picard_max_iter: int = 25
    lsmc_degree: int = 2
    lsmc_ridge: float = 1e-8
    dump_particles: int = 16

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.from_delay(self.t_end, self.delta, self.n_steps_per_delay)


def parse_time_function(spec: str) -> Callable:
    """A number, or ``ramp:a:b`` for a + b t."""
    s = str(spec).strip()
    if s.startswith("ramp:"):
        parts = s.split(":")
        if len(parts) != 3:
            raise ConfigError(f"ramp must look like ramp:a:b, got {s!r}")
        a, b = float(parts[1]), float(parts[2])
        return lambda t: a + b * np.asarray(t, dtype=float)
    c = float(s)
    return lambda t: np.full(np.shape(t), c) if np.ndim(t) else c


def _read_raw(path: Path) -> dict:
    text = path.read_text()
    if text.lstrip().startswith("{"):
        raw = json.loads(text)
        flat = {}
        for k, v in raw.items():
            if isinstance(v, dict):
                for kk, vv in v.items():
                    flat[f"{k}_{kk}"] = vv
            else:
                flat[k] = v
        return flat
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace(".", "_").replace("-", "_")] = v
    return out


def load_config(path, seed_override: int | None = None) -> ScenarioConfig:
    try:
        raw = _read_raw(Path(path))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(str(exc)) from None
    types = {f.name: f.type for f in fields(ScenarioConfig)}
    unknown = set(raw) - set(types)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    if "scenario" not in raw:
        raise ConfigError("missing key 'scenario'")
    if seed_override is not None:
        raw["seed"] = seed_override
    kwargs = {}
    for k, v in raw.items():
        t = types[k]
        try:
            if t == "int":
                fv = float(v)
                if fv != int(fv):
                    raise ValueError
                kwargs[k] = int(fv)
            elif t == "float":
                kwargs[k] = float(v)
            else:
                kwargs[k] = str(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{k}: cannot read {v!r} as {t}") from None
    cfg = ScenarioConfig(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: ScenarioConfig) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.scenario in SCENARIOS, f"scenario must be one of {SCENARIOS}")
    need(np.isfinite(cfg.h) and 0.5 < cfg.h < 1, "h must satisfy 1/2 < h < 1")
    need(np.isfinite(cfg.t_end) and cfg.t_end > 0, "t_end must be positive")
    need(np.isfinite(cfg.delta) and cfg.delta > 0, "delta must be positive")
    need(cfg.n_steps_per_delay >= 1, "n_steps_per_delay must be >= 1")
    need(cfg.n_paths >= 2, "n_paths must be >= 2")
    need(0 <= cfg.seed < 2**64, "seed must be an unsigned 64-bit integer")
    need(cfg.sampler in ("auto", "cholesky", "circulant"), "sampler must be auto, cholesky or circulant")
    need(cfg.tol_sigmas > 0, "tol_sigmas must be positive")
    need(cfg.xi1 > 0, "xi1 must be positive")
    need(0 < cfg.picard_damping <= 1, "picard_damping must lie in (0, 1]")
    need(cfg.picard_tol > 0, "picard_tol must be positive")
    need(cfg.picard_max_iter >= 1, "picard_max_iter must be >= 1")
    need(cfg.lsmc_degree >= 0, "lsmc_degree must be >= 0")
    need(cfg.lsmc_ridge >= 0, "lsmc_ridge must be >= 0")
    need(cfg.dump_particles >= 0, "dump_particles must be >= 0")
    need(cfg.problem in ("consumption", "lq"), "problem must be consumption or lq")
    for key in ("beta", "beta1", "beta2"):
        try:
            parse_time_function(getattr(cfg, key))
        except (ConfigError, ValueError):
            raise ConfigError(f"{key} must be a number or ramp:a:b") from None
    try:
        cfg.grid
    except MfDelayError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


class Outputs:
    def __init__(self, out_dir: Path, cfg: ScenarioConfig):
        self.dir = out_dir
        self.cfg = cfg
        self.header = f"# mfdelay {__version__} config_sha256={cfg.config_hash}"
        self.gates: list[tuple[str, bool, str]] = []

    def gate(self, name: str, ok: bool, detail: str = "") -> None:
        self.gates.append((name, bool(ok), detail))

    def csv(self, name: str, columns: list[str], rows) -> None:
        with open(self.dir / name, "w", newline="") as fh:
            fh.write(self.header + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow([x if isinstance(x, (int, str)) else repr(float(x)) for x in r])

    def report(self, body: dict) -> None:
        doc = {
            "meta": {"tool": "mfdelay", "version": __version__, "config_sha256": self.cfg.config_hash},
            "config": asdict(self.cfg),
            "gates": [{"name": n, "pass": ok, "detail": d} for n, ok, d in self.gates],
            **body,
        }
        (self.dir / "report.json").write_text(json.dumps(_jsonable(doc), sort_keys=True, indent=2) + "\n")


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if np.isfinite(f) else repr(f)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


def _noise(cfg: ScenarioConfig, grid: TimeGrid | None = None, method: str | None = None):
    return fbm.sample(grid or cfg.grid, cfg.h, cfg.n_paths, cfg.seed, method or cfg.sampler)


def _state_moment_rows(paths: sdde.ParticlePaths):
    t, mean, var = paths.moment_trace()
    return zip(t, mean, var)


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------


def run_fbm_stats(cfg: ScenarioConfig, out: Outputs) -> None:
    grid = cfg.grid
    c = fbm.covariance_matrix(grid, cfg.h)
    body = {"samplers": {}}
    if grid.n_steps <= 512:
        lower = fbm.cholesky_factor(grid, cfg.h)
        err = float(np.max(np.abs(lower @ lower.T - c)) / np.max(np.abs(c)))
        out.gate("cholesky_exact_covariance", err <= 1e-10, f"rel_err={err:.3e}")
        body["cholesky_rel_error"] = err
        methods = ("cholesky", "circulant")
    else:
        methods = ("circulant",)
    var_diag = np.diag(c)
    self_sim = float(np.max(np.abs(var_diag - grid.nodes[1:] ** (2 * cfg.h))))
    out.gate("variance_self_similarity", self_sim <= 1e-12, f"max_err={self_sim:.3e}")
    moments = None
    for method in methods:
        ens = _noise(cfg, method=method)
        b = ens.values[:, 1:]
        emp = b.T @ b / ens.n_paths
        se = np.sqrt((np.outer(var_diag, var_diag) + c * c) / ens.n_paths)
        z = (emp - c) / se
        zmax = float(np.max(np.abs(z)))
        out.gate(f"{method}_covariance", zmax <= cfg.tol_sigmas, f"max|z|={zmax:.3f}")
        body["samplers"][method] = {"max_abs_z": zmax, "var_T": float(emp[-1, -1]), "analytic_var_T": float(c[-1, -1])}
        if moments is None:
            moments = (grid.nodes, ens.values.mean(axis=0), ens.values.var(axis=0, ddof=1))
    out.csv("state_moments.csv", ["t", "mean", "var"], zip(*moments))
    out.report(body)


def run_isometry(cfg: ScenarioConfig, out: Outputs) -> None:
    grid = cfg.grid
    ens = _noise(cfg)
    T = grid.t_end
    funcs = {
        "one": SampledFunction.constant(grid, 1.0),
        "ramp": SampledFunction.from_callable(grid, lambda t: t),
        "first_half": SampledFunction.indicator(grid, 0.0, T / 2),
    }
    body = {"isometry": {}, "ibp": {}}
    for name, f in funcs.items():
        r = fcalc.check_isometry(f, ens, cfg.tol_sigmas)
        out.gate(f"isometry_{name}", r.passed, f"z={r.z:.3f}")
        body["isometry"][name] = r.to_dict()
    g1 = SampledFunction.indicator(grid, 0.0, T / 2)
    g2 = SampledFunction.indicator(grid, T / 2, T + grid.dt)
    r = fcalc.check_ibp_deterministic(g1, g2, ens, cfg.tol_sigmas)
    out.gate("ibp_disjoint_indicators", r.passed, f"z={r.z:.3f}")
    body["ibp"]["disjoint_indicators"] = r.to_dict()
    out.report(body)


def _consumption(cfg: ScenarioConfig, out: Outputs, write: bool = True):
    noise = _noise(cfg)
    beta = parse_time_function(cfg.beta)
    sol = control.solve_consumption(cfg.t_end, cfg.delta, cfg.xi1, beta, cfg.x0, noise)
    dyn = sdde.cash_flow_dynamics(cfg.delta, cfg.t_end, beta, cfg.x0)
    cost = control.consumption_cost(cfg.xi1)
    foc = float(np.max(np.abs(1.0 / sol.policy.values - sol.adjoint.p)))
    out.gate("adjoint_positive", bool(np.all(sol.adjoint.p > 0)), f"min_p={float(sol.adjoint.p.min()):.6f}")
    out.gate("first_order_identity", foc <= 1e-12, f"max|1/rho-p|={foc:.3e}")
    if write:
        t = noise.grid.nodes
        sol.adjoint.to_csv(out.dir / "p.csv", header=out.header)
        out.csv("control.csv", ["t", "rho"], zip(t, sol.policy.values))
        out.csv("state_moments.csv", ["t", "mean", "var"], _state_moment_rows(sol.paths))
    return noise, sol, dyn, cost, foc


def _dominance_csv(out: Outputs, rep: control.MpReport) -> None:
    rep.to_csv(out.dir / "dominance.csv", header=out.header)


def run_consumption(cfg: ScenarioConfig, out: Outputs) -> None:
    noise, sol, dyn, cost, foc = _consumption(cfg, out)
    dom = control.verify_dominance(dyn, cost, sol.policy, None, noise)
    out.gate("dominance", dom.passed, f"max_dJ={max(r['dJ'] for r in dom.rows):.3e}")
    _dominance_csv(out, dom)
    out.report({
        "J": sol.performance.to_dict(),
        "p0": float(sol.adjoint.p[0]),
        "segments": [list(s) for s in sol.adjoint.segments.segments],
        "first_order_max_error": foc,
        "dominance": dom.to_dict(),
    })


def _lq(cfg: ScenarioConfig):
    noise = _noise(cfg)
    b1, b2 = parse_time_function(cfg.beta1), parse_time_function(cfg.beta2)
    basis = adj.BasisConfig(cfg.lsmc_degree, cfg.lsmc_ridge)
    sol = control.solve_lq_picard(
        cfg.t_end, cfg.delta, b1, b2, cfg.x0, noise, cfg.picard_damping, cfg.picard_tol, cfg.picard_max_iter, basis
    )
    return noise, sol, sdde.lq_dynamics(cfg.delta, cfg.t_end, b1, b2, cfg.x0), control.lq_cost()


def run_lq(cfg: ScenarioConfig, out: Outputs) -> None:
    noise, sol, dyn, cost = _lq(cfg)
    grid = noise.grid
    t = grid.nodes
    out.gate("picard_converged", True, f"iterations={sol.iterations}")
    out.gate("fixed_point_residual", sol.residual <= 2 * sol.residual_std_error,
             f"mean|alpha-p|={sol.residual:.3e} stderr={sol.residual_std_error:.3e}")
    zero = sdde.OpenLoop(np.zeros(grid.n_steps + 1))
    J0 = control.evaluate_J(dyn, zero, cost, noise)
    diff = sol.performance.contributions - J0.contributions
    se = float(np.std(diff, ddof=1) / np.sqrt(diff.size))
    out.gate("beats_zero_control", float(np.mean(diff)) >= -2 * se, f"dJ={float(np.mean(diff)):.4e} se={se:.2e}")
    dom = control.verify_dominance(dyn, cost, sol.policy, None, noise)
    out.gate("dominance", dom.passed, f"max_dJ={max(r['dJ'] for r in dom.rows):.3e}")
    _dominance_csv(out, dom)
    k = min(cfg.dump_particles, noise.n_paths)
    out.csv("p.csv", ["particle_id", "t", "p"],
            ((i, tk, v) for i in range(k) for tk, v in zip(t, sol.adjoint.p[i])))
    out.csv("control.csv", ["particle_id", "t", "alpha"],
            ((i, tk, v) for i in range(k) for tk, v in zip(t, sol.policy.values[i])))
    out.csv("state_moments.csv", ["t", "mean", "var"], _state_moment_rows(sol.paths))
    out.report({
        "J": sol.performance.to_dict(),
        "J_zero_control": J0.to_dict(),
        "iterations": sol.iterations,
        "history": sol.history,
        "residual": sol.residual,
        "residual_stderr": sol.residual_std_error,
        "lsmc": sol.adjoint.diagnostics,
        "dominance": dom.to_dict(),
    })


def run_verify(cfg: ScenarioConfig, out: Outputs) -> None:
    if cfg.problem == "consumption":
        noise, sol, dyn, cost, _ = _consumption(cfg, out, write=False)
        u_star, p_sol = sol.policy, sol.adjoint
        grid = noise.grid
        rng = fbm.path_generator(cfg.seed ^ 0x5EED, 0)
        perts = {name: u_star.shifted(0.1, v) for name, v in control.default_directions(grid).items()}
        for j in range(3):
            perts[f"random{j}"] = u_star.shifted(0.1, rng.uniform(-1, 1, grid.n_steps + 1))
        nonopt = sdde.OpenLoop(np.ones(grid.n_steps + 1))
        direction = np.ones(grid.n_steps + 1)
    else:
        noise, sol, dyn, cost = _lq(cfg)
        u_star, p_sol = sol.policy, sol.adjoint
        grid = noise.grid
        perts = {name: u_star.shifted(0.1, v) for name, v in control.default_directions(grid).items()}
        nonopt = sdde.OpenLoop(np.zeros(grid.n_steps + 1))
        direction = np.tanh(noise.values)
    nec = control.verify_necessary(dyn, cost, u_star, perts, p_sol, noise)
    out.gate("necessary_stationary", nec.summary["stationary"],
             f"max|G|={max(abs(r['G']) for r in nec.rows):.3e}")
    dom = control.verify_dominance(dyn, cost, u_star, None, noise)
    out.gate("dominance", dom.passed, f"max_dJ={max(r['dJ'] for r in dom.rows):.3e}")
    gat = control.gateaux_check(dyn, cost, nonopt, direction, noise)
    out.gate("gateaux", gat.passed, f"rel_err={gat.rows[-1]['rel_error']:.3e}")
    _dominance_csv(out, dom)
    out.report({"necessary": nec.to_dict(), "dominance": dom.to_dict(), "gateaux": gat.to_dict()})


RUNNERS = {
    "fbm-stats": run_fbm_stats,
    "isometry": run_isometry,
    "consumption": run_consumption,
    "lq": run_lq,
    "verify": run_verify,
}


def run(config_path, out_dir=".", seed: int | None = None, quiet: bool = False) -> int:
    try:
        cfg = load_config(config_path, seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    out = Outputs(out_path, cfg)
    try:
        RUNNERS[cfg.scenario](cfg, out)
    except (MfDelayError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if not quiet:
        for name, ok, detail in out.gates:
            print(f"{'PASS' if ok else 'FAIL'} {name} {detail}".rstrip())
    return EXIT_OK if all(ok for _, ok, _ in out.gates) else EXIT_GATE


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mfdelay", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one scenario")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=".", help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed (u64)")
    p_run.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)
    return run(args.config, args.out, args.seed, args.quiet)


if __name__ == "__main__":
    sys.exit(main())
