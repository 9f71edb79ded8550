"""Convergence-time and energy-cost bounds, and sample estimates of their constants.

The closed forms take the constants as plain numbers.  The estimators return
sample extrema (with the extremal point for audit); they are estimates of a sup
or inf over a continuum, so the resulting bounds are estimates too, never
certificates.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import jax
import jax.numpy as jnp
import numpy as np

from .control import Controller
from .diffnet import lipschitz_upper_bound, mlp_forward
from .errors import BoundInapplicableError, ConfigurationError
from .lyapunov import generator_terms
from .sde import controlled_coeffs, ensemble
from .train import sample_domain


@dataclass(frozen=True)
class Bound:
    T_eps: float
    energy_bound: float

    def __iter__(self):
        return iter((self.T_eps, self.energy_bound))


def _check_eps(x0_norm, eps):
    if not eps > 0:
        raise BoundInapplicableError(f"eps must be positive, got {eps}")
    if eps > x0_norm:
        raise BoundInapplicableError(f"eps={eps} exceeds |x0|={x0_norm}")


def _energy(gain, L, x0_norm, exponent):
    """gain^2 |x0|^2 / (gain^2 + 2L) * (exp(2 (gain^2 + 2L) * exponent) - 1).

    For gain^2 + 2L < 0 both factors are negative and the product stays
    positive; at exactly zero the expression takes its limit 2 gain^2 |x0|^2 exponent.
    """
    s = gain * gain + 2.0 * L
    if gain == 0 or exponent == 0:
        return 0.0
    if s == 0:
        return 2.0 * gain * gain * x0_norm * x0_norm * exponent
    try:
        growth = math.expm1(2.0 * s * exponent)
    except OverflowError:
        return math.inf
    return gain * gain * x0_norm * x0_norm / s * growth


def thm3_bounds(L, k, x0_norm, eps) -> Bound:
    """Linear controller u = k x on a drift with <x, f(x)> <= L |x|^2."""
    _check_eps(x0_norm, eps)
    rate = k * k - 2.0 * L
    if not rate > 0:
        raise BoundInapplicableError(f"need k^2 > 2L, got k={k}, L={L}")
    log_ratio = math.log(x0_norm / eps)
    return Bound(2.0 * log_ratio / rate, _energy(k, L, x0_norm, log_ratio / rate))


def thm4_bounds(c1, c2, c3, p, V_x0, L, k_u, x0_norm, eps) -> Bound:
    """Exponential stabilizer with c1|x|^p <= V, LV <= c2 V, |grad V^T g_u|^2 >= c3 V^2."""
    _check_eps(x0_norm, eps)
    rate = c3 - 2.0 * c2
    if not rate > 0:
        raise BoundInapplicableError(f"need c3 - 2 c2 > 0, got {rate}")
    if not (c1 > 0 and p > 0):
        raise BoundInapplicableError("need c1 > 0 and p > 0")
    floor = c1 * eps**p
    if V_x0 < floor:
        raise BoundInapplicableError(f"V(x0)={V_x0} is below c1 eps^p={floor}")
    log_ratio = math.log(V_x0 / floor)
    return Bound(2.0 * log_ratio / rate, _energy(k_u, L, x0_norm, log_ratio / rate))


def thm5_bounds(alpha, delta_eps, L, k_u, x0_norm, eps) -> Bound:
    """Asymptotic stabilizer with the attractiveness expression <= -delta_eps |x|^(4 - alpha)."""
    _check_eps(x0_norm, eps)
    if not 0 < alpha < 1:
        raise BoundInapplicableError(f"alpha must lie in (0, 1), got {alpha}")
    if not delta_eps > 0:
        raise BoundInapplicableError(f"need delta_eps > 0, got {delta_eps}")
    gap = x0_norm**alpha - eps**alpha
    return Bound(2.0 * gap / (delta_eps * alpha), _energy(k_u, L, x0_norm, gap / (delta_eps * alpha)))


# --- constant estimators ---------------------------------------------------------------


@dataclass(frozen=True)
class Extremum:
    value: float
    at: list


@dataclass(frozen=True)
class EsConstants:
    c1: float
    c2: float
    c3: float
    p: float
    valid: bool
    c2_at: list
    c3_at: list


@dataclass(frozen=True)
class DeltaEstimate:
    delta: float
    valid: bool
    at: list


def _samples(sys, domain, n_samples, seed, exclusion, samples):
    if samples is not None:
        X = np.asarray(samples, dtype=float).reshape(-1, sys.d)
    else:
        box = np.asarray(domain, dtype=float)
        if box.shape == (1, 2):
            box = np.repeat(box, sys.d, axis=0)
        X = sample_domain(box, n_samples, seed=seed, exclusion=exclusion)
    if np.any(np.linalg.norm(X, axis=1) == 0):
        raise ConfigurationError("samples must exclude the origin")
    return X


@jax.jit
def _drift_ratio(e, fe):
    return (e @ fe) / (e @ e)


def estimate_L(sys, domain=((-5.0, 5.0),), n_samples=10_000, seed=0, samples=None, exclusion=1e-6) -> Extremum:
    """Sample max of <x, f(x)> / |x|^2 (a lower estimate of the true sup)."""
    X = _samples(sys, domain, n_samples, seed, exclusion, samples)

    def ratio(x):
        e, fe, _, _ = controlled_coeffs(sys, None, x)
        return _drift_ratio(e, fe)

    vals = np.asarray(jax.vmap(ratio)(jnp.asarray(X)))
    i = int(np.argmax(vals))
    return Extremum(float(vals[i]), X[i].tolist())


def estimate_es_constants(V, sys, u, domain=((-5.0, 5.0),), n_samples=10_000, seed=0, samples=None, exclusion=1e-3):
    """c1 = eps and p = 2 from the V construction; c2 = max LV/V, c3 = min |grad V^T g_u|^2 / V^2."""
    X = _samples(sys, domain, n_samples, seed, exclusion, samples)
    v, lv, gg = (np.asarray(a) for a in jax.vmap(lambda x: generator_terms(V, sys, u, x))(jnp.asarray(X)))
    up, down = lv / v, gg / v**2
    i, j = int(np.argmax(up)), int(np.argmin(down))
    c2, c3 = float(up[i]), float(down[j])
    return EsConstants(float(V.eps), c2, c3, 2.0, bool(c3 - 2.0 * c2 > 0), X[i].tolist(), X[j].tolist())


def _as_expression(sys, u, alpha):
    def expr(x):
        e, fe, gu, _ = controlled_coeffs(sys, u, x)
        nx2 = e @ e
        xg = e @ gu
        raw = nx2 * (2.0 * (e @ fe) + jnp.sum(gu * gu)) - (2.0 - alpha) * (xg @ xg)
        return nx2 ** ((alpha - 4.0) / 2.0) * raw

    return jax.jit(jax.vmap(expr))


def estimate_delta_eps(sys, u, alpha, eps, domain=((-5.0, 5.0),), n_samples=10_000, seed=0, samples=None) -> DeltaEstimate:
    """delta_eps = -max over Omega with |x| >= eps of |x|^(alpha-4) times the attractiveness expression."""
    if not 0 < alpha < 1:
        raise ConfigurationError("alpha must lie in (0, 1)")
    X = _samples(sys, domain, n_samples, seed, eps, samples)
    X = X[np.linalg.norm(X, axis=1) >= eps]
    vals = np.asarray(_as_expression(sys, u, float(alpha))(jnp.asarray(X)))
    i = int(np.argmax(vals))
    delta = -float(vals[i])
    return DeltaEstimate(delta, bool(delta > 0), X[i].tolist())


# --- controller Lipschitz constants --------------------------------------------------------


def controller_lipschitz_upper(u: Controller, radius=None) -> float:
    """Upper bound on the Frobenius-norm Lipschitz constant of u.

    Shift nets inherit the spectral-norm product.  ``diag`` controllers x * NN(x)
    are only locally Lipschitz, so ``radius`` (the ball of interest) is required.
    """
    if u.kind == "linear":
        k = np.asarray(u.k, dtype=float)
        return float(abs(k)) if k.ndim == 0 else float(np.linalg.norm(k, 2))
    lip = lipschitz_upper_bound(u.net)
    if u.kind == "shift":
        return lip
    if radius is None:
        raise ConfigurationError("diag controllers need a radius for a Lipschitz bound")
    at0 = float(np.max(np.abs(np.asarray(mlp_forward(u.net, jnp.zeros(u.d))))))
    # |x NN(x) - y NN(y)| <= sup|NN| |x - y| + R Lip |x - y|, sup|NN| <= |NN(0)| + Lip R
    return at0 + 2.0 * radius * lip


def controller_lipschitz_empirical(u: Controller, domain=((-5.0, 5.0),), n_pairs=10_000, seed=0) -> float:
    """Largest |u(x) - u(y)|_F / |x - y| over random pairs (a lower estimate)."""
    rng = np.random.Generator(np.random.Philox(seed))
    box = np.asarray(domain, dtype=float)
    if box.shape == (1, 2):
        box = np.repeat(box, u.d, axis=0)
    X = rng.uniform(box[:, 0], box[:, 1], size=(n_pairs, u.d))
    Y = rng.uniform(box[:, 0], box[:, 1], size=(n_pairs, u.d))

    def slope(x, y):
        return jnp.linalg.norm(u(x) - u(y)) / jnp.linalg.norm(x - y)

    return float(jnp.max(jax.vmap(slope)(jnp.asarray(X), jnp.asarray(Y))))


# --- Monte Carlo validation ----------------------------------------------------------------


@dataclass(frozen=True)
class MonteCarlo:
    mean: float
    stderr: float
    n: int
    censored: int
    passed: bool


def validate_bound(sys, u, bound_T_eps, x0, eps, n=500, dt=1e-3, base_seed=0) -> MonteCarlo:
    """Compare the Monte Carlo mean hitting time of |x| = eps with a bound.

    Trajectories are run to 10 * bound_T_eps; those that never hit are censored
    and counted at the horizon, which makes the reported mean a lower estimate.
    PASS when mean <= bound + 2 * stderr.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if eps >= np.linalg.norm(x0):
        return MonteCarlo(0.0, 0.0, n, 0, True)
    if not bound_T_eps > 0 or not math.isfinite(bound_T_eps):
        raise BoundInapplicableError(f"bound must be positive and finite, got {bound_T_eps}")
    n_steps = math.ceil(10.0 * bound_T_eps / dt)
    horizon = n_steps * dt
    ens = ensemble(sys, u, x0, n, dt=dt, T=horizon, eps=eps, base_seed=base_seed, record_every=max(1, n_steps // 100))
    taus = ens.hitting_times()
    censored = int(np.isnan(taus).sum())
    taus = np.where(np.isnan(taus), horizon, taus)
    mean = float(taus.mean())
    stderr = float(taus.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return MonteCarlo(mean, stderr, n, censored, bool(mean <= bound_T_eps + 2.0 * stderr))


def bound_report(theorem, inputs: dict, bound: Bound | None, validity: dict, monte_carlo: MonteCarlo | None = None) -> dict:
    """JSON-ready report; a missing bound means the theorem did not apply."""
    return {
        "theorem": int(theorem),
        "inputs": inputs,
        "T_eps": None if bound is None else _finite_or_str(bound.T_eps),
        "energy_bound": None if bound is None else _finite_or_str(bound.energy_bound),
        "validity_flags": validity,
        "monte_carlo": None if monte_carlo is None else asdict(monte_carlo),
    }


def _finite_or_str(x):
    return x if math.isfinite(x) else str(x)
