import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.optimize import minimize_scalar

from mfdelay import adjoint as adj
from mfdelay import control, fbm, sdde
from mfdelay.errors import AdmissibilityError, DomainError, NonConvergenceError, OptimalityConditionError
from mfdelay.grid import SampledFunction, TimeGrid
from mfdelay.meanfield import drift_fn

H = 0.75


def consumption_spec():
    dyn = sdde.cash_flow_dynamics(0.4, 1.0)
    return control.HamiltonianSpec(control.consumption_cost(1.0).running, dyn.drift, dyn.diffusion)


def lq_spec(beta1=0.5):
    dyn = sdde.lq_dynamics(0.4, 1.0, beta1, 1.0)
    return control.HamiltonianSpec(control.lq_cost().running, dyn.drift, dyn.diffusion)


def test_hamiltonian_examples():
    assert control.hamiltonian(consumption_spec(), 0.0, 0.5, 2.0, None, None, 1.0, 3.0) == pytest.approx(3.0)
    p, xb = 0.8, 1.3
    val = control.hamiltonian(lq_spec(0.5), 0.0, 0.0, xb, None, None, p, p)
    assert val == pytest.approx(-0.5 * p * p + (0.5 * xb + p) * p)
    zero = lambda *a: 0.0  # noqa: E731
    f0 = drift_fn(lambda t, x, xb, v1, v2, u: 0.0 * u, partials=dict.fromkeys(("x", "xbar", "v1", "v2", "u"), zero))
    spec = control.HamiltonianSpec(f0, lq_spec().b_hat, lq_spec().sigma_hat)
    assert control.hamiltonian(spec, 0.0, 1.0, 1.0, None, None, 0.3, 0.0, 0.0) == 0.0


def test_q_weight_closed_form():
    grid = TimeGrid(1.0, 8)
    q = SampledFunction.from_callable(grid, lambda t: np.cos(3 * t))
    tt = 0.37
    f = lambda s: q(s) * fbm.kernel_phi(s, tt, H) if s != tt else 0.0  # noqa: E731
    pts = sorted(set(list(grid.nodes[1:-1]) + [tt]))
    val, _ = integrate.quad(f, 0, 1, points=pts, limit=200)
    assert control.q_weight(q, H, tt) == pytest.approx(val, rel=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 5), st.floats(-3, 3), st.floats(-3, 3), st.floats(-5, 5), st.integers(0, 1))
def test_argmax_invariance(p, xb, x, qw, which):
    if which == 0:
        spec, bounds = consumption_spec(), (1e-6, 50.0)
    else:
        spec, bounds = lq_spec(), (-50.0, 50.0)

    def argmax(q):
        res = minimize_scalar(lambda u: -control.hamiltonian(spec, 0.1, x, xb, None, None, u, p, q),
                              bounds=bounds, method="bounded", options={"xatol": 1e-10})
        return res.x

    a0, a1 = argmax(0.0), argmax(qw)
    assert a0 == pytest.approx(a1, abs=1e-6)
    expect = 1.0 / p if which == 0 else p
    assert a0 == pytest.approx(expect, rel=1e-5, abs=1e-6)


@settings(max_examples=60)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.lists(st.floats(-3, 3), min_size=4, max_size=4),
       st.floats(0.0, 5.0), st.floats(-2, 2))
def test_hamiltonians_midpoint_concave(a, b, p, beta1):
    # coordinates (x, xbar, v, u); consumption takes u = exp-free positive values
    def h_cons(z):
        x, xb, v, u = z
        return np.log(abs(u) + 0.1) + p * (xb - (abs(u) + 0.1))

    def h_lq(z):
        x, xb, v, u = z
        return -0.5 * u * u + p * (beta1 * xb + u)

    za, zb = np.array(a), np.array(b)
    mid = 0.5 * (za + zb)
    assert h_lq(mid) >= 0.5 * (h_lq(za) + h_lq(zb)) - 1e-9
    # the consumption part is concave on the positive half line; sample there
    za[3], zb[3] = abs(za[3]) + 0.1, abs(zb[3]) + 0.1
    mid = 0.5 * (za + zb)
    hc = lambda z: np.log(z[3]) + p * (z[1] - z[3])  # noqa: E731
    assert hc(mid) >= 0.5 * (hc(za) + hc(zb)) - 1e-9
    g = control.lq_cost().terminal
    ga, gb = g(x=za[0], v=za[2]), g(x=zb[0], v=zb[2])
    assert g(x=mid[0], v=mid[2]) >= 0.5 * (ga + gb) - 1e-9


@pytest.fixture(scope="module")
def lq_noise():
    return fbm.sample(TimeGrid.from_delay(1.0, 0.4, 10), H, 20_000, 101)


def test_evaluate_J_lq_examples(lq_noise):
    n1 = lq_noise.grid.n_steps + 1
    rep = control.evaluate_J(sdde.lq_dynamics(0.4, 1.0, 0.0, 1.0), sdde.OpenLoop(np.zeros(n1)), control.lq_cost(), lq_noise)
    assert abs(rep.J + 0.5) <= 4 * rep.std_error
    assert rep.n_paths == 20_000 and rep.running == 0.0
    assert rep.std_error == pytest.approx(np.std(rep.contributions, ddof=1) / np.sqrt(20_000))
    quiet = control.evaluate_J(sdde.lq_dynamics(0.4, 1.0, 0.3, 0.0), sdde.OpenLoop(np.zeros(n1)), control.lq_cost(), lq_noise)
    assert quiet.J == 0.0


def test_unbiased_variance_in_lq_cost():
    grid = TimeGrid.from_delay(1.0, 0.4, 2)
    noise = fbm.sample(grid, H, 7, 1)
    paths = sdde.simulate(sdde.lq_dynamics(0.4, 1.0, 0.0, 1.0), sdde.OpenLoop(np.zeros(grid.n_steps + 1)), noise)
    rep = control.performance(control.lq_cost(), paths)
    assert rep.terminal == pytest.approx(-0.5 * np.var(paths.terminal, ddof=1), rel=1e-12)


def test_evaluate_J_consumption_constant():
    grid = TimeGrid.from_delay(1.0, 0.4, 10)
    rep = control.evaluate_J(sdde.cash_flow_dynamics(0.4, 1.0), sdde.OpenLoop(np.ones(grid.n_steps + 1)),
                             control.consumption_cost(1.0), sdde.zero_noise(grid, 4))
    assert rep.J == pytest.approx(1.0, abs=1e-14)
    assert rep.std_error == 0.0


def test_log_utility_admissibility():
    grid = TimeGrid.from_delay(1.0, 0.4, 2)
    u = np.ones(grid.n_steps + 1)
    u[2] = 0.0
    with pytest.raises(AdmissibilityError):
        control.evaluate_J(sdde.cash_flow_dynamics(0.4, 1.0), sdde.OpenLoop(u), control.consumption_cost(1.0),
                           sdde.zero_noise(grid))


def test_solve_consumption_examples():
    grid = TimeGrid.from_delay(1.0, 0.4, 20)
    noise = sdde.zero_noise(grid, 2)
    sol = control.solve_consumption(1.0, 0.4, 1.0, 0.0, 1.0, noise)
    assert sol.policy.values[0] == pytest.approx(1 / 1.62, abs=1e-12)
    assert sol.policy.values[0] == pytest.approx(0.617284, abs=1e-6)
    assert sol.policy.values[-1] == 1.0
    assert np.max(np.abs(1 / sol.policy.values - sol.adjoint.p)) <= 1e-12
    long = control.solve_consumption(1.0, 2.0, 4.0, 0.0, 1.0, sdde.zero_noise(TimeGrid.from_delay(1.0, 2.0, 40), 2))
    assert np.all(long.policy.values == 0.25)
    with pytest.raises(DomainError):
        control.solve_consumption(1.0, 0.4, -1.0, 0.0, 1.0, noise)


def test_consumption_positivity_asserted(monkeypatch):
    grid = TimeGrid.from_delay(1.0, 0.4, 2)
    real = adj.solve_deterministic

    def broken(*a, **k):
        sol = real(*a, **k)
        p = sol.p.copy()
        p[0] = -1.0
        return adj.BsdeSolution(sol.grid, sol.delay, p, sol.q, sol.method, sol.segments)

    monkeypatch.setattr(control.adj, "solve_deterministic", broken)
    with pytest.raises(OptimalityConditionError):
        control.solve_consumption(1.0, 0.4, 1.0, 0.0, 1.0, sdde.zero_noise(grid))


def test_consumption_dominance_long_delay():
    grid = TimeGrid.from_delay(1.0, 2.0, 40)
    noise = fbm.sample(grid, H, 2000, 9)
    sol = control.solve_consumption(1.0, 2.0, 2.0, 0.3, 1.0, noise)
    assert np.all(sol.policy.values == 0.5)
    rep = control.verify_dominance(sdde.cash_flow_dynamics(2.0, 1.0, 0.3), control.consumption_cost(2.0),
                                   sol.policy, None, noise)
    assert rep.passed
    assert all(r["dJ"] <= 2 * r["stderr"] + 1e-12 for r in rep.rows)


@pytest.fixture(scope="module")
def consumption_setup():
    grid = TimeGrid.from_delay(1.0, 0.4, 10)
    noise = fbm.sample(grid, H, 4000, 12)
    sol = control.solve_consumption(1.0, 0.4, 1.0, 0.3, 1.0, noise)
    return noise, sol, sdde.cash_flow_dynamics(0.4, 1.0, 0.3), control.consumption_cost(1.0)


def test_necessary_condition(consumption_setup):
    noise, sol, dyn, cost = consumption_setup
    perts = {"self": sol.policy, **{k: sol.policy.shifted(0.1, v) for k, v in control.default_directions(noise.grid).items()}}
    rep = control.verify_necessary(dyn, cost, sol.policy, perts, sol.adjoint, noise)
    assert rep.rows[0]["G"] == 0.0
    assert all(abs(r["G"]) <= 1e-12 for r in rep.rows)
    assert rep.passed and rep.summary["stationary"]
    wrong = sdde.OpenLoop(2 * sol.policy.values)
    bad = control.verify_necessary(dyn, cost, wrong,
                                   {k: wrong.shifted(0.1, v) for k, v in control.default_directions(noise.grid).items()},
                                   sol.adjoint, noise)
    assert any(abs(r["G"]) > 4 * r["stderr"] for r in bad.rows)
    assert not bad.summary["stationary"]


def test_perturbations_must_be_open_loop(consumption_setup):
    noise, sol, dyn, cost = consumption_setup
    with pytest.raises(DomainError):
        control.verify_necessary(dyn, cost, sol.policy, {"fb": sdde.Feedback(lambda *a: 1.0)}, sol.adjoint, noise)


def test_dominance_zero_step_and_determinism(consumption_setup, tmp_path):
    noise, sol, dyn, cost = consumption_setup
    dirs = {"+1": np.ones(noise.grid.n_steps + 1)}
    rep = control.verify_dominance(dyn, cost, sol.policy, dirs, noise, thetas=(0.0, 0.1))
    assert rep.rows[0]["dJ"] == 0.0
    again = control.verify_dominance(dyn, cost, sol.policy, dirs, noise, thetas=(0.0, 0.1))
    assert rep.to_json() == again.to_json()
    rep.to_csv(tmp_path / "d.csv", header="# h")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[1] == "direction,theta,J,dJ,stderr,pass"
    assert json.loads(rep.to_json())["kind"] == "dominance"


def test_gateaux_zero_direction(consumption_setup):
    noise, sol, dyn, cost = consumption_setup
    rep = control.gateaux_check(dyn, cost, sol.policy, np.zeros(noise.grid.n_steps + 1), noise)
    assert all(r["fd"] == 0.0 and r["formula"] == 0.0 for r in rep.rows)
    assert rep.passed


def test_gateaux_deterministic_first_order():
    grid = TimeGrid.from_delay(1.0, 0.4, 20)
    noise = sdde.zero_noise(grid, 2)
    dyn, cost = sdde.cash_flow_dynamics(0.4, 1.0), control.consumption_cost(1.0)
    rep = control.gateaux_check(dyn, cost, sdde.OpenLoop(np.ones(grid.n_steps + 1)), np.ones(grid.n_steps + 1), noise)
    errs = [r["abs_error"] for r in rep.rows]
    # error shrinks linearly in theta
    assert errs[1] / errs[0] == pytest.approx(0.1, rel=0.1)
    assert errs[2] / errs[1] == pytest.approx(0.1, rel=0.1)
    assert rep.rows[-1]["rel_error"] <= 0.05 and rep.passed


def test_gateaux_vanishes_at_optimum(consumption_setup):
    noise, sol, dyn, cost = consumption_setup
    rng = np.random.default_rng(0)
    v = rng.uniform(-1, 1, noise.grid.n_steps + 1)
    rows = control.gateaux_check(dyn, cost, sol.policy, v, noise).rows
    # the quotient collapses linearly in theta onto the (near-zero) first-order term
    assert abs(rows[-1]["fd"]) <= 0.02 * abs(rows[0]["fd"]) + 2 * abs(rows[-1]["formula"])
    # p is the exact continuous adjoint while Y is Euler-discretized, so the
    # derivative at rho* is an O(dt) discretization residue
    vals = []
    for k in (10, 20, 40, 80):
        grid = TimeGrid.from_delay(1.0, 0.4, k)
        zn = sdde.zero_noise(grid, 2)
        opt = control.solve_consumption(1.0, 0.4, 1.0, 0.0, 1.0, zn)
        rep = control.gateaux_check(sdde.cash_flow_dynamics(0.4, 1.0), cost, opt.policy, np.ones(grid.n_steps + 1), zn)
        vals.append(abs(rep.summary["formula"]))
    orders = np.log2(np.array(vals[:-1]) / np.array(vals[1:]))
    assert np.all(orders >= 0.9), orders
    assert vals[-1] <= 5e-3


def test_lq_without_noise_is_trivial(lq_noise):
    sol = control.solve_lq_picard(1.0, 0.4, 0.5, 0.0, 0.0, lq_noise)
    assert sol.iterations == 1
    assert np.all(sol.policy.values == 0.0) and np.all(sol.adjoint.p == 0.0)


@pytest.fixture(scope="module")
def lq_fixed_point(lq_noise):
    return control.solve_lq_picard(1.0, 0.4, 0.0, 1.0, 0.0, lq_noise, damping=0.5, tol=1e-3)


def test_lq_fixed_point_properties(lq_noise, lq_fixed_point):
    sol = lq_fixed_point
    assert sol.residual <= 2 * sol.residual_std_error
    gap = sol.policy.values - sol.adjoint.p
    assert np.max(np.mean(gap * gap, axis=0)) <= 1e-3
    dyn = sdde.lq_dynamics(0.4, 1.0, 0.0, 1.0, 0.0)
    J0 = control.evaluate_J(dyn, sdde.OpenLoop(np.zeros(lq_noise.grid.n_steps + 1)), control.lq_cost(), lq_noise)
    diff = sol.performance.contributions - J0.contributions
    assert diff.mean() >= -2 * diff.std(ddof=1) / np.sqrt(diff.size)
    assert [h["iteration"] for h in sol.history] == list(range(1, sol.iterations + 1))


def test_lq_initialization_independence(lq_noise, lq_fixed_point):
    n1 = lq_noise.grid.n_steps + 1
    dyn = sdde.lq_dynamics(0.4, 1.0, 0.0, 1.0, 0.0)
    paths0 = sdde.simulate(dyn, sdde.OpenLoop(np.zeros(n1)), lq_noise)
    p0 = adj.solve_lsmc(0.4, adj.CenteredState(), 0.0, paths0, lq_noise).p
    other = control.solve_lq_picard(1.0, 0.4, 0.0, 1.0, 0.0, lq_noise, damping=0.7, tol=1e-3, alpha0=p0)
    d = other.policy.values - lq_fixed_point.policy.values
    assert np.sqrt(np.max(np.mean(d * d, axis=0))) <= 5e-3


def test_lq_full_step_does_not_settle(lq_noise):
    with pytest.raises(NonConvergenceError) as info:
        control.solve_lq_picard(1.0, 0.4, 0.5, 1.0, 0.0, lq_noise, damping=1.0, max_iter=6)
    assert len(info.value.history) == 6


def test_lq_bad_damping(lq_noise):
    with pytest.raises(DomainError):
        control.solve_lq_picard(1.0, 0.4, 0.0, 1.0, 0.0, lq_noise, damping=0.0)
