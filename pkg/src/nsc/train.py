"""Empirical ES / AS losses and the gradient-descent training loop."""

from __future__ import annotations

import functools
import time
from dataclasses import asdict, dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from .diffnet import adam_init, adam_step, check_finite_loss
from .errors import ConfigurationError, InvariantViolationError
from .lyapunov import generator_terms
from .sde import controlled_coeffs


@dataclass
class TrainConfig:
    loss: str = "as"  # "es" or "as"
    b: float = 2.5
    alpha: float = 0.5
    drift_factor: int = 2  # 2 -> 2<x, f> from the Ito expansion of |x|^2, 1 -> <x, f>
    domain: list = field(default_factory=lambda: [(-5.0, 5.0)])
    n_samples: int = 500
    resample: bool = True
    max_iters: int = 2000
    zero_streak: int = 10
    seed: int = 0
    lr: float = 0.01
    lr_decay: float = 1.0
    lr_decay_every: int = 0
    exclusion: float | None = None

    def __post_init__(self):
        if self.loss not in ("es", "as"):
            raise ConfigurationError(f"loss must be 'es' or 'as', got {self.loss!r}")
        if self.loss == "es" and not self.b > 2:
            raise ConfigurationError(f"ES loss needs b > 2, got {self.b}")
        if self.loss == "as" and not 0 < self.alpha < 1:
            raise ConfigurationError(f"AS loss needs alpha in (0, 1), got {self.alpha}")
        if self.drift_factor not in (1, 2):
            raise ConfigurationError("drift_factor must be 1 or 2")
        self.domain = [tuple(float(v) for v in lohi) for lohi in self.domain]

    def box(self, d: int) -> np.ndarray:
        dom = np.asarray(self.domain, dtype=float)
        if dom.shape[0] == 1:
            dom = np.repeat(dom, d, axis=0)
        if dom.shape != (d, 2):
            raise ConfigurationError(f"domain has {dom.shape[0]} intervals for a {d}-dimensional state")
        return dom

    def exclusion_radius(self, d: int) -> float:
        if self.exclusion is not None:
            return self.exclusion
        return 1e-3 * float(np.max(np.abs(self.box(d))))


@dataclass
class LossReport:
    iteration: int
    loss: float
    active: int
    wall_time: float


# --- sampling --------------------------------------------------------------------


def _sample(rng, box, n, exclusion):
    box = np.asarray(box, dtype=float)
    half = 0.5 * (box[:, 1] - box[:, 0])
    if exclusion > 0 and not exclusion < half.min():
        raise ConfigurationError("exclusion radius must be below the smallest half-width of the domain")
    out = []
    have = drawn = 0
    while have < n:
        block = max(n - have, 16) * 2
        pts = rng.uniform(box[:, 0], box[:, 1], size=(block, box.shape[0]))
        drawn += block
        keep = pts[np.linalg.norm(pts, axis=1) >= exclusion] if exclusion > 0 else pts
        out.append(keep)
        have += keep.shape[0]
        if drawn >= 1000 and have / drawn < 0.01:
            raise ConfigurationError("rejection rate above 99%: exclusion ball covers the domain")
    return np.concatenate(out)[:n]


def sample_domain(box, n, seed=0, exclusion=0.0) -> np.ndarray:
    """``n`` uniform points of the box ``[(lo, hi), ...]`` with norm >= ``exclusion``."""
    rng = np.random.Generator(np.random.Philox(seed))
    return _sample(rng, box, n, exclusion)


# --- losses -----------------------------------------------------------------------


def _es_raw(V, u, sys, x, b):
    v, lv, gg = generator_terms(V, sys, u, x)
    return b * lv / v - gg / v**2, v


def _as_raw(u, sys, x, alpha, c):
    e, fe, gu, _ = controlled_coeffs(sys, u, x)
    xg = e @ gu
    nx2 = e @ e
    return (alpha - 2.0) * (xg @ xg) + nx2 * (c * (e @ fe) + jnp.sum(gu * gu))


@functools.partial(jax.jit, static_argnames=("sys",))
def es_terms(V, u, sys, X, b):
    """Per-sample ES expression b LV/V - |grad V^T g_u|^2 / V^2 (before the hinge) and V."""
    return jax.vmap(lambda x: _es_raw(V, u, sys, x, b))(X)


@functools.partial(jax.jit, static_argnames=("sys", "c"))
def as_terms(u, sys, X, alpha, c=2):
    """Per-sample AS expression (alpha-2)|x^T g_u|^2 + |x|^2 (c<x,f> + |g_u|_F^2) before the hinge."""
    return jax.vmap(lambda x: _as_raw(u, sys, x, alpha, c))(X)


def es_loss(V, u, sys, samples, b) -> float:
    if not b > 2:
        raise ConfigurationError("b must exceed 2")
    raw, v = es_terms(V, u, sys, jnp.asarray(samples, dtype=jnp.float64), b)
    v = np.asarray(v)
    if np.any(v <= 0):
        bad = int(np.flatnonzero(v <= 0)[0])
        raise InvariantViolationError(f"V(x) <= 0 at sample {bad}: Lyapunov construction broken")
    return float(np.mean(np.maximum(np.asarray(raw), 0.0)))


def as_loss(u, sys, samples, alpha, drift_factor=2) -> float:
    if not 0 < alpha < 1:
        raise ConfigurationError("alpha must lie in (0, 1)")
    raw = as_terms(u, sys, jnp.asarray(samples, dtype=jnp.float64), alpha, int(drift_factor))
    return float(np.mean(np.maximum(np.asarray(raw), 0.0)))


@functools.partial(jax.jit, static_argnames=("sys",))
def _es_value_grad(params, sys, X, b):
    def total(p):
        V, u = p
        raw, _ = jax.vmap(lambda x: _es_raw(V, u, sys, x, b))(X)
        terms = jnp.maximum(raw, 0.0)
        return jnp.mean(terms), terms

    return jax.value_and_grad(total, has_aux=True)(params)


@functools.partial(jax.jit, static_argnames=("sys", "c"))
def _as_value_grad(u, sys, X, alpha, c):
    def total(u_):
        terms = jnp.maximum(jax.vmap(lambda x: _as_raw(u_, sys, x, alpha, c))(X), 0.0)
        return jnp.mean(terms), terms

    return jax.value_and_grad(total, has_aux=True)(u)


# --- training -----------------------------------------------------------------------


@dataclass
class TrainResult:
    V: object
    u: object
    reports: list
    converged: bool
    config: TrainConfig

    def __iter__(self):
        return iter((self.V, self.u, self.reports))

    @property
    def iterations(self) -> int:
        return len(self.reports)

    @property
    def final_loss(self) -> float:
        return self.reports[-1].loss if self.reports else float("nan")

    def time_per_iteration(self, skip=1) -> float:
        """Median wall-clock per iteration, skipping the compile-bearing first ones."""
        walls = [r.wall_time for r in self.reports[skip:]] or [r.wall_time for r in self.reports]
        return float(np.median(walls))


def train(cfg: TrainConfig, sys, V, u, callback=None) -> TrainResult:
    """Minimise the configured empirical loss by Adam.

    ES trains ``(V, u)`` jointly; AS trains ``u`` and ignores ``V``.  Stops after
    ``cfg.zero_streak`` consecutive batches with loss exactly zero, or after
    ``cfg.max_iters`` iterations (returning the best parameters seen, with
    ``converged=False``).  ``callback(report, V, u)`` runs after every iteration
    with the current parameters.
    """
    if cfg.loss == "es" and V is None:
        raise ConfigurationError("ES training needs a Lyapunov candidate")
    if u is None:
        raise ConfigurationError("training needs a controller")
    box = cfg.box(sys.d)
    excl = cfg.exclusion_radius(sys.d)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    params = (V, u) if cfg.loss == "es" else u
    opt = adam_init(params, lr=cfg.lr)
    reports = []
    best = (np.inf, params)
    streak = 0
    converged = False
    X = None
    for it in range(cfg.max_iters):
        t0 = time.perf_counter()
        if X is None or cfg.resample:
            X = jnp.asarray(_sample(rng, box, cfg.n_samples, excl))
        if cfg.loss == "es":
            (value, terms), grads = _es_value_grad(params, sys, X, cfg.b)
        else:
            (value, terms), grads = _as_value_grad(params, sys, X, cfg.alpha, cfg.drift_factor)
        value = float(value)
        check_finite_loss(value, terms)
        active = int(np.count_nonzero(np.asarray(terms) > 0))
        if value < best[0]:
            best = (value, params)
        streak = streak + 1 if value == 0.0 else 0
        converged = streak >= cfg.zero_streak
        if not converged:
            if cfg.lr_decay_every and it and it % cfg.lr_decay_every == 0:
                opt.lr *= cfg.lr_decay
            params, opt = adam_step(opt, params, grads)
            jax.block_until_ready(params)
        report = LossReport(it, value, active, time.perf_counter() - t0)
        reports.append(report)
        if callback is not None:
            callback(report, *_split(cfg, V, params))
        if converged:
            break
    if not converged:
        params = best[1]
    return TrainResult(*_split(cfg, V, params), reports, converged, cfg)


def _split(cfg, V, params):
    return params if cfg.loss == "es" else (V, params)


def report_to_json(report: LossReport) -> dict:
    return asdict(report)
