"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``CRITERION <n> PASS|FAIL`` line with the measured
quantities, then asserts.  The benchmark suites are run once per session and
shared between the criteria that read them.
"""

import math
import time

import jax
import jax.flatten_util
import jax.numpy as jnp
import numpy as np
import pytest

from helpers import central_grad, central_hessian, rel_err
from nsc import bench, bounds, control, lyapunov, systems
from nsc.diffnet import init_mlp, mlp_forward, smoothed_relu
from nsc.sde import SdeSystem, strong_order_probe
from nsc.train import _as_value_grad, _es_value_grad, as_terms, es_terms, sample_domain

pytestmark = pytest.mark.acceptance

_SUITES = {}


def suite(name):
    if name not in _SUITES:
        t0 = time.perf_counter()
        result = bench.run_suite(name)
        _SUITES[name] = (result, time.perf_counter() - t0)
    return _SUITES[name]


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {n}: {detail}"


# --- 1. differentiation -----------------------------------------------------------------------


def _linear_system(d, seed):
    rng = np.random.default_rng(seed)
    # unstable drift keeps the hinge active on most samples
    A = jnp.asarray(1.5 * np.eye(d) + rng.uniform(-0.3, 0.3, (d, d)))
    B = jnp.asarray(rng.uniform(-1, 1, (d, d)))
    return SdeSystem(d, 1, lambda x: A @ x, lambda x: (B @ x)[:, None], f"linear{d}")


LINEAR = {d: _linear_system(d, d) for d in range(1, 5)}


@jax.jit
def _value(net, x):
    return mlp_forward(net, x)[0]


_grad = jax.jit(jax.grad(_value, argnums=1))
_hess = jax.jit(jax.jacfwd(jax.grad(_value, argnums=1), argnums=1))


def _directional_check(value_grad, params, n_dirs, rng, h=1e-6):
    """Gradient projected on random directions vs central differences along them."""
    (value, _), grads = value_grad(params)
    flat, unravel = jax.flatten_util.ravel_pytree(params)
    g = np.asarray(jax.flatten_util.ravel_pytree(grads)[0])
    flat = np.asarray(flat)
    dirs = rng.standard_normal((n_dirs, flat.size))
    exact = dirs @ g
    fd = np.array([
        (float(value_grad(unravel(jnp.asarray(flat + h * v)))[0][0]) - float(value_grad(unravel(jnp.asarray(flat - h * v)))[0][0])) / (2 * h)
        for v in dirs
    ])
    return float(value), rel_err(exact, fd)


def test_criterion_1_differentiation(capsys):
    t0 = time.perf_counter()
    worst = {"grad": 0.0, "hess": 0.0, "es": 0.0, "as": 0.0}
    skipped_zero = 0
    for i in range(100):
        rng = np.random.default_rng(1000 + i)
        # shapes cycle through 8 combinations so compilation stays a small part of the budget
        d = 1 + i % 4
        width = (32, 8, 16, 32)[i % 4]
        act = ("tanh", "smoothed_relu")[(i // 4) % 2]
        net = init_mlp([d, width, width, 1], activation=act, seed=i, knot=0.5)
        x = rng.uniform(-1, 1, d)

        def F(z, net=net):
            return float(_value(net, jnp.asarray(z)))

        worst["grad"] = max(worst["grad"], rel_err(_grad(net, jnp.asarray(x)), central_grad(F, x)))
        worst["hess"] = max(worst["hess"], rel_err(_hess(net, jnp.asarray(x)), central_hessian(F, x)))

        sys = LINEAR[d]
        X = jnp.asarray(sample_domain([(-2.0, 2.0)] * d, 32, seed=i, exclusion=0.1))
        u = control.neural_shift(d, 1, hidden=(16,), seed=i, activation=act, knot=0.5)
        value, err = _directional_check(lambda p: _as_value_grad(p, sys, X, 0.5, 2), u, 3, rng)
        skipped_zero += value == 0
        worst["as"] = max(worst["as"], err if value > 0 else 0.0)
        V = lyapunov.init_quadratic(d, hidden=(16,), seed=i) if act == "tanh" else lyapunov.init_icnn(d, hidden=(16, 16), seed=i, knot=0.5)
        value, err = _directional_check(lambda p: _es_value_grad(p, sys, X, 2.5), (V, u), 3, rng)
        skipped_zero += value == 0
        worst["es"] = max(worst["es"], err if value > 0 else 0.0)
    runtime = time.perf_counter() - t0
    ok = worst["grad"] < 1e-5 and worst["hess"] < 1e-4 and worst["es"] < 1e-5 and worst["as"] < 1e-5 and runtime < 60
    detail = ", ".join(f"max rel err {k} {v:.1e}" for k, v in worst.items())
    verdict(capsys, 1, ok, f"{detail}; zero-loss batches {skipped_zero}; {runtime:.0f}s")


# --- 2. smoothed ReLU -------------------------------------------------------------------------


def test_criterion_2_smoothed_relu(capsys):
    d = 0.1
    s1 = jax.vmap(jax.grad(lambda x: smoothed_relu(x, d)))
    s2 = jax.vmap(jax.grad(jax.grad(lambda x: smoothed_relu(x, d))))
    jumps = []
    for knot in (0.0, d):
        # the third derivative is bounded by 6/d^2, so a continuous curvature moves ~1e-9 across this gap
        side = jnp.array([knot - 1e-12, knot + 1e-12])
        v = np.asarray(smoothed_relu(side, d))
        jumps += [abs(v[1] - v[0]), abs(np.diff(np.asarray(s1(side)))[0]), abs(np.diff(np.asarray(s2(side)))[0])]
    c2 = max(jumps) < 1e-8
    grid = jnp.linspace(-1.0, 1.0, 10_000)
    slope = np.asarray(s1(grid))
    curvature = np.asarray(s2(grid))
    values = np.asarray(smoothed_relu(grid, d))
    second_diff = values[:-2] - 2 * values[1:-1] + values[2:]
    convex = curvature.min() >= 0 and second_diff.min() >= -1e-15
    ok = c2 and convex and slope.min() >= 0 and slope.max() <= 1 and float(smoothed_relu(d, d)) == d / 2
    verdict(capsys, 2, ok, f"max jump at knots {max(jumps):.1e}, min curvature {curvature.min():.1e}, slope range [{slope.min():.3f}, {slope.max():.3f}]")


# --- 3. Lyapunov constructions ------------------------------------------------------------------


def test_criterion_3_lyapunov(capsys):
    t0 = time.perf_counter()
    X = np.random.default_rng(0).uniform(-5, 5, (100_000, 3))
    margins = {}
    for name, V in (("icnn", lyapunov.init_icnn(3, seed=1)), ("quadratic", lyapunov.init_quadratic(3, seed=2))):
        at_zero = float(V(jnp.zeros(3)))
        vals = np.asarray(jax.jit(jax.vmap(V))(jnp.asarray(X)))
        # the floor is rounded exactly as inside V, so the comparison needs no tolerance
        floor = np.asarray(jax.jit(jax.vmap(lambda x, e=V.eps: e * jnp.sum(x * x)))(jnp.asarray(X)))
        slack = vals - floor
        margins[name] = (at_zero, float(slack.min()))
    V = lyapunov.init_icnn(3, seed=3)
    inner = jax.jit(jax.vmap(V.inner_g))
    rng = np.random.default_rng(4)
    A, B = rng.uniform(-5, 5, (2, 10_000, 3))
    gap = np.asarray(inner(jnp.asarray((A + B) / 2))) - (np.asarray(inner(jnp.asarray(A))) + np.asarray(inner(jnp.asarray(B)))) / 2
    violations = int(np.sum(gap > 1e-12))
    runtime = time.perf_counter() - t0
    ok = all(z == 0.0 and m >= 0 for z, m in margins.values()) and violations == 0 and runtime < 60
    verdict(capsys, 3, ok, f"V(0) and min V - eps|x|^2: {margins}; convexity violations {violations}; {runtime:.0f}s")


# --- 4. integrator ---------------------------------------------------------------------------------


def test_criterion_4_strong_order(capsys):
    t0 = time.perf_counter()
    dts = [2.0**-k for k in range(6, 13)]
    noisy = strong_order_probe(systems.make_gbm(0.5, 1.0), dts, n_paths=1000)
    still = strong_order_probe(systems.make_gbm(0.5, 0.0), dts, n_paths=10)
    runtime = time.perf_counter() - t0
    ok = 0.4 <= noisy <= 0.6 and 0.9 <= still <= 1.1 and runtime < 120
    verdict(capsys, 4, ok, f"GBM slope {noisy:.3f}, deterministic slope {still:.3f}; {runtime:.0f}s")


# --- 5. log drift without linear stabilisation ----------------------------------------------------


def test_criterion_5_log_drift(capsys):
    result, runtime = suite("prop1")
    quad = result.row("u=2x^2")["fraction_converged"]
    lin = {k: result.row(f"u={k}x")["fraction_converged"] for k in (1, 2)}
    ok = quad >= 0.95 and all(f < 0.5 for f in lin.values()) and runtime < 180
    verdict(capsys, 5, ok, f"u=2x^2 converged {quad:.2f}; linear {lin}; {runtime:.0f}s")


# --- 6. linear-controller bound ------------------------------------------------------------------------


def test_criterion_6_linear_bound(capsys):
    t0 = time.perf_counter()
    T_eps, _ = bounds.thm3_bounds(1.0, 2.0, 1.0, 0.1)
    mc = bounds.validate_bound(systems.make_gbm(a=1.0, b=0.0), control.linear(2.0), T_eps, [1.0], 0.1, n=500)
    runtime = time.perf_counter() - t0
    ok = abs(T_eps - 2.302585) < 1e-6 and mc.passed and runtime < 120
    verdict(capsys, 6, ok, f"T_eps {T_eps:.6f}, MC mean {mc.mean:.4f} +- {mc.stderr:.4f} (censored {mc.censored}); {runtime:.0f}s")


# --- 7. energy comparison -------------------------------------------------------------------------------


def test_criterion_7_energy(capsys):
    result, runtime = suite("energy-compare")
    lin, learned = result.rows[0], result.row("AS")
    ratio, k_star = result.extras["energy_ratio"], result.extras["k_star"]
    ok = (
        ratio >= 5
        and lin["fraction_converged"] >= 0.9
        and learned["fraction_converged"] >= 0.9
        and 4.8 <= k_star <= 6.4
        and runtime < 600
    )
    detail = (
        f"mean energy linear-k6 {lin['mean_energy']:.4g} vs AS {learned['mean_energy']:.4g} (ratio {ratio:.2f}); "
        f"converged {lin['fraction_converged']:.2f} / {learned['fraction_converged']:.2f}; k* {k_star}; {runtime:.0f}s"
    )
    verdict(capsys, 7, ok, detail)


# --- 8. harmonic oscillator -------------------------------------------------------------------------------


def test_criterion_8_harmonic(capsys):
    result, runtime = suite("harmonic")
    rows = {m: result.row(m) for m in bench.HARMONIC_METHODS}
    trained = {m: bool(r.get("train_converged")) for m, r in rows.items()}
    stable = {m: r.get("fraction_converged", 0.0) for m, r in rows.items()}
    per_iter = {m: r.get("time_per_iter", math.inf) for m, r in rows.items()}
    ordered = per_iter["AS"] < per_iter["ES(+Quadratic)"] < per_iter["ES(+ICNN)"]
    ok = all(trained.values()) and all(f >= 0.9 for f in stable.values()) and ordered and runtime < 1800
    detail = f"zero loss {trained}; fraction Di<0.05 {stable}; ms/iter " + str({m: round(1e3 * t, 2) for m, t in per_iter.items()})
    verdict(capsys, 8, ok, f"{detail}; {runtime:.0f}s")


# --- 9. Stuart-Landau, single -------------------------------------------------------------------------------


def test_criterion_9_stuart_single(capsys):
    result, runtime = suite("stuart-single")
    controlled = result.row("AS")["fraction_converged"]
    collapse = result.row("uncontrolled-inside-to-origin")
    inside = result.extras["inside_fraction"]
    ok = controlled >= 0.9 and collapse["value"] >= 0.9 and 0 < inside < 1 and runtime < 600
    detail = f"AS within 0.1 of the cycle {controlled:.2f}; uncontrolled inside radii reaching 0: {collapse['value']:.2f} of {collapse['n']}"
    verdict(capsys, 9, ok, f"{detail}; {runtime:.0f}s")


# --- 10. Stuart-Landau, coupled ---------------------------------------------------------------------------------


def test_criterion_10_stuart_coupled(capsys):
    result, runtime = suite("stuart-coupled")
    drift_off = result.row("on-manifold")["value"]
    sync = result.row("AS")["Di"]
    ok = drift_off < 1e-6 and sync < 0.05 and runtime < 900
    verdict(capsys, 10, ok, f"on-manifold deviation {drift_off:.1e}; AS mean sync error {sync:.4f}; {runtime:.0f}s")


# --- 11. loss/condition equivalence -----------------------------------------------------------------------------


def test_criterion_11_loss_condition(capsys):
    result, _ = suite("harmonic")
    cfg = bench.HarmonicConfig()
    sys = systems.make_harmonic()
    box = [tuple(cfg.domain[0])] * 2
    X = jnp.asarray(sample_domain(box, 10_000, seed=2024, exclusion=1e-3 * max(abs(v) for v in cfg.domain[0])))
    t0 = time.perf_counter()
    holds = {}
    for method in ("ES(+ICNN)", "ES(+Quadratic)"):
        if not result.row(method).get("train_converged"):
            continue
        V, u = result.models[method]
        raw, _ = es_terms(V, u, sys, X, cfg.b)
        holds[method] = float(np.mean(np.asarray(raw) <= 0))
    if result.row("AS").get("train_converged"):
        _, u = result.models["AS"]
        holds["AS"] = float(np.mean(np.asarray(as_terms(u, sys, X, cfg.alpha, 2)) <= 0))
    runtime = time.perf_counter() - t0
    ok = "AS" in holds and any(m.startswith("ES") for m in holds) and all(f >= 0.99 for f in holds.values()) and runtime < 120
    verdict(capsys, 11, ok, f"fraction of 10^4 fresh samples satisfying the condition {holds}; {runtime:.0f}s")
