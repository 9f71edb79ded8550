"""Euler-Maruyama simulation of controlled SDEs dx = f dt + [g + u] dB.

Every trajectory owns a Philox stream seeded with its own integer seed; the
Gaussian increments are produced from it by Box-Muller in a fixed order, so a
(seed, dt, T, x0) tuple determines a path bit-for-bit.  Ensembles are integrated
as one vectorised batch inside a jitted ``lax.scan``.
"""

from __future__ import annotations

import csv
import functools
import json
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from .control import Controller, control_eval
from .errors import ConfigurationError, DivergenceError, DomainError, ShapeError

DIVERGENCE_NORM = 1e8
_CHUNK = 1024


@dataclass(frozen=True, eq=False)
class SdeSystem:
    """Drift ``f``/diffusion ``g`` on single states (jax-traceable), zero solution at 0.

    ``error_map`` optionally projects states onto the coordinates whose zero is
    the control target (e.g. deviations from a synchronisation manifold).  The
    controller is evaluated at the projected state.
    """

    d: int
    r: int
    f: Callable
    g: Callable
    label: str = ""
    params: dict = field(default_factory=dict)
    error_map: np.ndarray | None = None
    domain: Callable | None = None
    exact: Callable | None = None

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.d,):
            raise ShapeError(f"{self.label}: expected state of shape ({self.d},), got {x.shape}")
        if self.domain is not None and not self.domain(x):
            raise DomainError(f"{self.label}: state {x} outside the system's domain")
        return x

    def drift(self, x):
        return np.asarray(self.f(jnp.asarray(self._check(x))))

    def diffusion(self, x):
        return np.asarray(self.g(jnp.asarray(self._check(x))))

    def error(self, x):
        """Target coordinates of ``x`` (identity unless ``error_map`` is set)."""
        return x if self.error_map is None else jnp.asarray(self.error_map) @ x


def controlled_coeffs(sys: SdeSystem, u: Controller | None, x):
    """Return ``(e, f_e, g_e, u_val)``: target-coordinate state, drift and controlled
    diffusion g + u, plus the raw control matrix (zeros when ``u`` is None)."""
    e = sys.error(x)
    fx = sys.f(x)
    gx = sys.g(x)
    uu = jnp.zeros((sys.d, sys.r), dtype=gx.dtype) if u is None else control_eval(u, e)
    gu = gx + uu
    if sys.error_map is not None:
        E = jnp.asarray(sys.error_map)
        fx, gu = E @ fx, E @ gu
    return e, fx, gu, uu


def em_step(sys: SdeSystem, u: Controller | None, x, dt: float, dW, step: int = 0):
    """x + f(x) dt + (g(x) + u(x)) dW."""
    x = jnp.asarray(x, dtype=jnp.float64)
    dW = jnp.asarray(dW, dtype=jnp.float64)
    if dW.shape != (sys.r,):
        raise ShapeError(f"dW must have shape ({sys.r},)")
    gx = sys.g(x)
    if u is not None:
        gx = gx + control_eval(u, sys.error(x))
    out = x + sys.f(x) * dt + gx @ dW
    if not np.all(np.isfinite(np.asarray(out))):
        raise DivergenceError(f"non-finite state at step {step}", step=step)
    return out


# --- Brownian increments --------------------------------------------------------


class BrownianStream:
    """N(0, 1) draws from a Philox stream via Box-Muller pairs."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.rng = np.random.Generator(np.random.Philox(self.seed))
        self._spare = np.empty(0)

    def normals(self, count: int) -> np.ndarray:
        need = count - self._spare.size
        if need > 0:
            pairs = (need + 1) // 2
            u = self.rng.random((pairs, 2))
            rad = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
            ang = 2.0 * np.pi * u[:, 1]
            fresh = np.empty(2 * pairs)
            fresh[0::2] = rad * np.cos(ang)
            fresh[1::2] = rad * np.sin(ang)
            pool = np.concatenate([self._spare, fresh])
        else:
            pool = self._spare
        out, self._spare = pool[:count], pool[count:]
        return out


# --- integration core ------------------------------------------------------------


@functools.partial(jax.jit, static_argnames=("sys",))
def _em_scan(sys, u, x, alive, dW, dt):
    def one(xi, dwi):
        gu = sys.g(xi)
        if u is None:
            ed = jnp.zeros((), dtype=xi.dtype)
        else:
            uu = control_eval(u, sys.error(xi))
            gu = gu + uu
            ed = jnp.sum(uu**2)
        return xi + sys.f(xi) * dt + gu @ dwi, ed

    def err_norm(xi):
        return jnp.linalg.norm(sys.error(xi))

    def step(carry, dw):
        x, alive = carry
        xn, ed = jax.vmap(one)(x, dw)
        ok = jnp.all(jnp.isfinite(xn), axis=1) & (jnp.linalg.norm(xn, axis=1) <= DIVERGENCE_NORM)
        ok = ok & alive
        x = jnp.where(ok[:, None], xn, x)
        return (x, ok), (x, jax.vmap(err_norm)(x), ed, ok)

    (x, alive), outs = jax.lax.scan(step, (x, alive), dW)
    return x, alive, outs


@functools.partial(jax.jit, static_argnames=("sys",))
def _err_norms(sys, x):
    return jax.vmap(lambda xi: jnp.linalg.norm(sys.error(xi)))(x)


def _n_steps(dt, T):
    if not dt > 0 or not T > 0:
        raise ConfigurationError("dt and T must be positive")
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(T, 1.0):
        raise ConfigurationError(f"dt={dt} does not divide T={T}")
    return n


def _integrate(sys, u, x0s, dt, n_steps, increments, eps=None, record_every=1):
    """Integrate a batch of trajectories.

    ``increments(k)`` returns the next ``k`` Brownian increments, shape (k, n, r),
    already scaled by sqrt(dt).  Returns a dict of numpy arrays.
    """
    x0s = np.asarray(x0s, dtype=float)
    n = x0s.shape[0]
    record_every = max(int(record_every), 1)
    rec_idx = list(range(0, n_steps + 1, record_every))
    if rec_idx[-1] != n_steps:
        rec_idx.append(n_steps)
    rec_pos = {k: j for j, k in enumerate(rec_idx)}

    states = np.full((len(rec_idx), n, sys.d), np.nan)
    norms = np.full((len(rec_idx), n), np.nan)
    energy_rec = np.zeros((len(rec_idx), n))
    states[0] = x0s
    n0 = np.asarray(_err_norms(sys, jnp.asarray(x0s)))
    norms[0] = n0

    tau = np.full(n, np.nan)
    if eps is not None:
        tau[n0 <= eps] = 0.0
    energy = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    div_step = np.full(n, -1)
    prev_norm = n0.copy()

    x = jnp.asarray(x0s)
    alive_j = jnp.asarray(alive)
    done = 0
    while done < n_steps:
        k = min(_CHUNK, n_steps - done)
        dW = np.zeros((_CHUNK, n, sys.r))
        dW[:k] = increments(k)
        _, _, (xs, ns, eds, oks) = _em_scan(sys, u, x, alive_j, jnp.asarray(dW), dt)
        xs, ns, eds, oks = (np.asarray(a)[:k] for a in (xs, ns, eds, oks))
        # step i of this chunk goes from t_{done+i} to t_{done+i+1}
        t0 = (done + np.arange(k)) * dt
        was_alive = np.vstack([alive[None, :], oks[:-1]])
        newly_dead = was_alive & ~oks
        for i, j in zip(*np.nonzero(newly_dead)):
            div_step[j] = done + i + 1
        if eps is not None:
            pending = np.isnan(tau)
            hit = (ns <= eps) & oks & pending[None, :]
            first = np.where(hit.any(axis=0), hit.argmax(axis=0), -1)
            for j in np.nonzero(first >= 0)[0]:
                i = first[j]
                before = prev_norm[j] if i == 0 else ns[i - 1, j]
                after = ns[i, j]
                frac = 1.0 if before == after else (before - eps) / (before - after)
                tau[j] = t0[i] + dt * min(max(frac, 0.0), 1.0)
            stop = np.where(np.isnan(tau), np.inf, tau)
        else:
            stop = np.full(n, np.inf)
        weight = np.clip(stop[None, :] - t0[:, None], 0.0, dt) * was_alive
        cum = energy[None, :] + np.cumsum(eds * weight, axis=0)
        energy = cum[-1]
        for i in range(k):
            j = rec_pos.get(done + i + 1)
            if j is not None:
                states[j] = np.where(oks[i][:, None], xs[i], np.nan)
                norms[j] = np.where(oks[i], ns[i], np.nan)
                energy_rec[j] = cum[i]
        prev_norm = ns[-1]
        alive = oks[-1]
        # padded tail steps of the last chunk are discarded
        x = jnp.asarray(xs[-1])
        alive_j = jnp.asarray(alive)
        done += k

    return {
        "times": np.asarray(rec_idx, dtype=float) * dt,
        "states": states,
        "norms": norms,
        "energy_path": energy_rec,
        "energy": energy,
        "tau": tau,
        "alive": alive,
        "div_step": div_step,
        "final": np.asarray(x),
    }


# --- trajectories -------------------------------------------------------------------


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    err_norms: np.ndarray
    energy_path: np.ndarray
    tau_eps: float | None
    energy: float
    seed: int
    eps: float | None = None
    diverged: bool = False
    divergence_step: int | None = None

    def to_csv(self, path) -> None:
        d = self.states.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *[f"x{i + 1}" for i in range(d)], "energy"])
            for t, xs, en in zip(self.times, self.states, self.energy_path):
                w.writerow([repr(float(t)), *[repr(float(v)) for v in xs], repr(float(en))])


def _trajectory(res, j, seed, eps):
    keep = ~np.isnan(res["norms"][:, j])
    div = int(res["div_step"][j])
    tau = res["tau"][j]
    return Trajectory(
        times=res["times"][keep],
        states=res["states"][keep, j],
        err_norms=res["norms"][keep, j],
        energy_path=res["energy_path"][keep, j],
        tau_eps=None if np.isnan(tau) else float(tau),
        energy=float(res["energy"][j]),
        seed=int(seed),
        eps=eps,
        diverged=div >= 0,
        divergence_step=div if div >= 0 else None,
    )


def _stream_increments(streams, r, dt):
    sq = math.sqrt(dt)

    def draw(k):
        return np.stack([s.normals(k * r).reshape(k, r) for s in streams], axis=1) * sq

    return draw


def simulate(sys, u, x0, dt=1e-3, T=1.0, eps=None, seed=0, record_every=1) -> Trajectory:
    """Integrate one path.  Raises DivergenceError (with the partial path attached)
    when the state leaves the divergence guard."""
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape != (sys.d,):
        raise ShapeError(f"x0 must have shape ({sys.d},)")
    n_steps = _n_steps(dt, T)
    stream = BrownianStream(seed)
    res = _integrate(sys, u, x0[None], dt, n_steps, _stream_increments([stream], sys.r, dt), eps, record_every)
    traj = _trajectory(res, 0, seed, eps)
    if traj.diverged:
        raise DivergenceError(
            f"{sys.label}: trajectory diverged at step {traj.divergence_step}",
            step=traj.divergence_step,
            trajectory=traj,
        )
    return traj


# --- ensembles ---------------------------------------------------------------------


CT_EPS = 0.05


@dataclass
class EnsembleResult:
    trajectories: list
    times: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    norm_mean: np.ndarray
    norm_var: np.ndarray
    eps: float | None
    base_seed: int
    dt: float
    T: float
    _norms: np.ndarray = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return len(self.trajectories)

    @property
    def n_diverged(self) -> int:
        return sum(t.diverged for t in self.trajectories)

    def _index_at(self, T):
        j = int(np.searchsorted(self.times, T + 1e-9 * max(T, 1.0), side="right")) - 1
        return max(j, 0)

    def norms_at(self, T) -> np.ndarray:
        """Target-error norm of every trajectory at time T (nan where diverged)."""
        return self._norms[self._index_at(T)]

    def fraction_converged(self, eps, T) -> float:
        nrm = self.norms_at(T)
        return float(np.sum(np.nan_to_num(nrm, nan=np.inf) < eps) / self.n)

    def hitting_times(self, eps=None) -> np.ndarray:
        """First time each trajectory's recorded error norm drops below ``eps``
        (nan if never); with ``eps=None`` the integrator-resolution tau values."""
        if eps is None:
            return np.array([np.nan if t.tau_eps is None else t.tau_eps for t in self.trajectories])
        below = np.nan_to_num(self._norms, nan=np.inf) < eps
        first = below.argmax(axis=0)
        return np.where(below.any(axis=0), self.times[first], np.nan)

    @property
    def mean_hitting_time(self) -> float | None:
        taus = self.hitting_times()
        taus = taus[~np.isnan(taus)]
        return float(taus.mean()) if taus.size else None

    @property
    def mean_energy(self) -> float:
        return float(np.mean([t.energy for t in self.trajectories]))

    def summary(self, T=None, ct_eps=CT_EPS) -> dict:
        """Ensemble statistics; Di is the mean error norm at T over surviving paths
        and Ct the mean first time the error norm falls below ``ct_eps``."""
        T = self.T if T is None else T
        taus = self.hitting_times()
        ct = self.hitting_times(ct_eps)
        out = {
            "n": self.n,
            "dt": self.dt,
            "T": self.T,
            "eps": self.eps,
            "base_seed": self.base_seed,
            "n_diverged": self.n_diverged,
            "mean_energy": self.mean_energy,
            "mean_hitting_time": self.mean_hitting_time,
            "n_hit": int(np.sum(~np.isnan(taus))),
            "final_norm_mean": _nanmean(self.norms_at(T)),
            "Di": _nanmean(self.norms_at(T)),
            "Ct": _nanmean(ct),
            "ct_eps": ct_eps,
        }
        if self.eps is not None:
            out["fraction_converged"] = self.fraction_converged(self.eps, T)
        return out

    def write(self, out_dir, per_trajectory=True, extra=None) -> None:
        os.makedirs(out_dir, exist_ok=True)
        summary = self.summary()
        if extra:
            summary.update(extra)
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2)
        if per_trajectory:
            for i, traj in enumerate(self.trajectories):
                traj.to_csv(os.path.join(out_dir, f"traj_{i}.csv"))


def _nanmean(a):
    a = np.asarray(a, dtype=float)
    return None if np.all(np.isnan(a)) else float(np.nanmean(a))


def ensemble(sys, u, x0_sampler, n, dt=1e-3, T=1.0, eps=None, base_seed=0, record_every=1) -> EnsembleResult:
    """Simulate ``n`` trajectories; trajectory ``i`` uses seed ``base_seed + i``.

    ``x0_sampler`` is a fixed state (d,), an (n, d) array, or a callable taking a
    numpy Generator (the trajectory's own stream) and returning a state.
    Divergent trajectories are flagged, not fatal.
    """
    if n < 1:
        raise ConfigurationError("ensemble size must be >= 1")
    n_steps = _n_steps(dt, T)
    streams = [BrownianStream(base_seed + i) for i in range(n)]
    if callable(x0_sampler):
        x0s = np.stack([np.asarray(x0_sampler(s.rng), dtype=float).reshape(sys.d) for s in streams])
    else:
        x0s = np.asarray(x0_sampler, dtype=float)
        x0s = np.broadcast_to(x0s.reshape(-1, sys.d) if x0s.ndim == 2 else x0s.reshape(1, sys.d), (n, sys.d))
    res = _integrate(sys, u, x0s, dt, n_steps, _stream_increments(streams, sys.r, dt), eps, record_every)
    trajs = [_trajectory(res, i, base_seed + i, eps) for i in range(n)]
    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(res["states"], axis=1)
        var = np.nanvar(res["states"], axis=1)
        norm_mean = np.nanmean(res["norms"], axis=1)
        norm_var = np.nanvar(res["norms"], axis=1)
    return EnsembleResult(trajs, res["times"], mean, var, norm_mean, norm_var, eps, base_seed, dt, T, res["norms"])


# --- integrator validation ------------------------------------------------------------


def strong_order_probe(sys, dt_list, T=1.0, x0=1.0, n_paths=1000, seed=0) -> float:
    """Least-squares slope of log strong error vs log dt for a system with an exact solution.

    ``sys.exact(x0, t, W_t)`` must give the exact state driven by the Brownian
    value ``W_t``.  All step sizes share the finest grid's increments.
    """
    if sys.exact is None:
        raise ConfigurationError("system has no exact solution")
    dts = sorted(float(h) for h in dt_list)
    if len(dts) < 2:
        raise ConfigurationError("need at least two step sizes")
    fine = dts[0]
    n_fine = _n_steps(fine, T)
    ratios = [int(round(h / fine)) for h in dts]
    if any(abs(m * fine - h) > 1e-12 for m, h in zip(ratios, dts)) or any(n_fine % m for m in ratios):
        raise ConfigurationError("step sizes must be integer multiples of the finest one dividing T")
    streams = [BrownianStream(seed + i) for i in range(n_paths)]
    dW = _stream_increments(streams, sys.r, fine)(n_fine)  # (n_fine, n_paths, r)
    x0s = np.full((n_paths, sys.d), x0, dtype=float)
    exact = np.asarray(sys.exact(x0s, T, dW.sum(axis=0)))
    errors = []
    for m, h in zip(ratios, dts):
        coarse = dW.reshape(n_fine // m, m, n_paths, sys.r).sum(axis=1)
        pos = [0]

        def take(k, coarse=coarse, pos=pos):
            out = coarse[pos[0] : pos[0] + k]
            pos[0] += k
            return out

        res = _integrate(sys, None, x0s, h, n_fine // m, take, record_every=n_fine // m)
        errors.append(np.mean(np.linalg.norm(res["final"] - exact, axis=1)))
    slope, _ = np.polyfit(np.log(dts), np.log(errors), 1)
    return float(slope)
