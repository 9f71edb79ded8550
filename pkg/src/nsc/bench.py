"""End-to-end benchmark suites: train where needed, simulate, and tabulate.

Every suite returns a :class:`BenchResult` whose rows share one CSV schema
(:data:`BENCH_COLUMNS`); cells that do not apply to a row are left empty.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import control, lyapunov, systems
from .errors import ConfigurationError, NscError
from .sde import ensemble
from .train import TrainConfig, train

BENCH_COLUMNS = [
    "suite",
    "method",
    "n",
    "T",
    "eps",
    "fraction_converged",
    "mean_hitting_time",
    "mean_energy",
    "median_energy",
    "n_diverged",
    "Tt",
    "Ni",
    "time_per_iter",
    "train_converged",
    "Di",
    "Ct",
    "value",
    "status",
]


@dataclass
class BenchResult:
    suite: str
    rows: list
    extras: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)

    def row(self, method) -> dict:
        for r in self.rows:
            if r["method"] == method:
                return r
        raise KeyError(method)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: _cell(r.get(k)) for k in BENCH_COLUMNS})


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return v


def _box_sampler(lo, hi, d):
    def sample(rng):
        return rng.uniform(lo, hi, d)

    return sample


def ensemble_row(suite, method, sys, u, x0, n, dt, T, eps, base_seed, record_every=10, metric=None, di_eps=None):
    """Simulate and summarise one method.

    ``metric(states) -> distances`` replaces the Euclidean error norm for Di/Ct
    (the coupled network reports its mean synchronisation error).
    """
    ens = ensemble(sys, u, x0, n, dt=dt, T=T, eps=eps, base_seed=base_seed, record_every=record_every)
    energies = np.array([t.energy for t in ens.trajectories])
    di_eps = eps if di_eps is None else di_eps
    if metric is None:
        dist = ens._norms
    else:
        dist = np.stack([metric(t.states) for t in ens.trajectories], axis=1)
    below = np.nan_to_num(dist, nan=np.inf) < di_eps
    ct = np.where(below.any(axis=0), ens.times[below.argmax(axis=0)], np.nan)
    final = dist[-1]
    row = {
        "suite": suite,
        "method": method,
        "n": n,
        "T": T,
        "eps": eps,
        "fraction_converged": float(np.mean(np.nan_to_num(final, nan=np.inf) < di_eps)),
        "mean_hitting_time": ens.mean_hitting_time,
        "mean_energy": float(np.mean(energies)),
        "median_energy": float(np.median(energies)),
        "n_diverged": ens.n_diverged,
        "Di": float(np.nanmean(final)) if np.isfinite(final).any() else math.nan,
        "Ct": float(np.nanmean(ct)) if np.isfinite(ct).any() else math.nan,
        "status": "ok",
    }
    return row, ens


def _train_columns(res):
    walls = [r.wall_time for r in res.reports]
    return {
        "Tt": float(np.sum(walls)),
        "Ni": res.iterations,
        "time_per_iter": res.time_per_iteration(),
        "train_converged": res.converged,
    }


# --- prop1 ------------------------------------------------------------------------------


@dataclass
class Prop1Config:
    n: int = 100
    dt: float = 1e-3
    T: float = 10.0
    eps: float = 0.05
    x0_low: float = 0.1
    x0_high: float = 2.0
    quadratic_coef: float = 2.0
    linear_gains: tuple = (1.0, 2.0)
    seed: int = 0


def prop1_x0(cfg: Prop1Config):
    """Uniform on [-hi, -lo] U [lo, hi]."""

    def sample(rng):
        mag = rng.uniform(cfg.x0_low, cfg.x0_high)
        return np.array([mag if rng.uniform() < 0.5 else -mag])

    return sample


def run_prop1(cfg: Prop1Config | None = None) -> BenchResult:
    cfg = cfg or Prop1Config()
    sys = systems.make_prop1()
    arms = [("none", None), (f"u={cfg.quadratic_coef:g}x^2", control.quadratic_diag(cfg.quadratic_coef))]
    arms += [(f"u={k:g}x", control.linear(k)) for k in cfg.linear_gains]
    rows = []
    for method, u in arms:
        row, _ = ensemble_row("prop1", method, sys, u, prop1_x0(cfg), cfg.n, cfg.dt, cfg.T, cfg.eps, cfg.seed, record_every=100)
        rows.append(row)
    return BenchResult("prop1", rows, {"config": asdict(cfg)})


# --- energy comparison -----------------------------------------------------------------------


@dataclass
class EnergyConfig:
    n: int = 100
    dt: float = 1e-3
    T: float = 1.0
    eps: float = 0.1
    x0_low: float = 9.0
    x0_high: float = 11.0
    k_linear: float = 6.0
    sweep: tuple = tuple(round(0.2 * j, 10) for j in range(1, 51))
    sweep_n: int = 100
    transition_fraction: float = 0.9
    alpha: float = 0.8
    domain: tuple = ((-0.5, 12.0),)
    hidden: tuple = (32,)
    activation: str = "smoothed_relu"
    max_iters: int = 5000
    seed: int = 0


def stabilization_transition(gains, fractions, threshold):
    """Smallest gain from which every larger swept gain reaches ``threshold``."""
    ok = np.asarray(fractions) >= threshold
    for i in range(len(gains)):
        if ok[i:].all():
            return float(gains[i])
    return math.nan


def run_energy_compare(cfg: EnergyConfig | None = None, sweep=True) -> BenchResult:
    cfg = cfg or EnergyConfig()
    sys = systems.make_log1p()
    x0 = _box_sampler(cfg.x0_low, cfg.x0_high, 1)
    rows = []
    row, _ = ensemble_row("energy-compare", f"linear-k{cfg.k_linear:g}", sys, control.linear(cfg.k_linear), x0, cfg.n, cfg.dt, cfg.T, cfg.eps, cfg.seed)
    rows.append(row)

    tcfg = TrainConfig(loss="as", alpha=cfg.alpha, domain=list(cfg.domain), max_iters=cfg.max_iters, seed=cfg.seed)
    u0 = control.neural_shift(1, 1, hidden=cfg.hidden, seed=cfg.seed, activation=cfg.activation)
    res = train(tcfg, sys, None, u0)
    row, _ = ensemble_row("energy-compare", "AS", sys, res.u, x0, cfg.n, cfg.dt, cfg.T, cfg.eps, cfg.seed)
    row.update(_train_columns(res))
    rows.append(row)
    ratio = rows[0]["mean_energy"] / rows[1]["mean_energy"]
    rows.append({"suite": "energy-compare", "method": "energy_ratio", "value": ratio, "status": "ok"})

    extras = {"config": asdict(cfg), "energy_ratio": ratio}
    if sweep:
        fractions = []
        for k in cfg.sweep:
            r, _ = ensemble_row("energy-compare", f"sweep-k{k:g}", sys, control.linear(k), x0, cfg.sweep_n, cfg.dt, cfg.T, cfg.eps, cfg.seed, record_every=50)
            rows.append(r)
            fractions.append(r["fraction_converged"])
        k_star = stabilization_transition(cfg.sweep, fractions, cfg.transition_fraction)
        rows.append({"suite": "energy-compare", "method": "k_star", "value": k_star, "status": "ok"})
        extras.update(k_star=k_star, sweep_fractions=fractions)
    return BenchResult("energy-compare", rows, extras, {"AS": (None, res.u)})


# --- harmonic oscillator ----------------------------------------------------------------------


@dataclass
class HarmonicConfig:
    n: int = 20
    dt: float = 1e-3
    T: float = 4.0
    eps: float = 0.05
    x0_box: float = 1.0
    domain: tuple = ((-5.0, 5.0),)
    n_samples: int = 500
    b: float = 2.5
    alpha: float = 0.5
    es_lr: float = 0.003
    as_lr: float = 0.01
    max_iters: int = 5000
    controller_hidden: tuple = (32,)
    controller_activation: str = "smoothed_relu"
    icnn_hidden: tuple = (32, 32)
    icnn_knot: float = 1.0
    quadratic_hidden: tuple = (32, 32)
    seed: int = 0


HARMONIC_METHODS = ("ES(+ICNN)", "ES(+Quadratic)", "AS")


def train_harmonic(method, cfg: HarmonicConfig, sys=None):
    sys = sys or systems.make_harmonic()
    u = control.neural_shift(2, 1, hidden=cfg.controller_hidden, seed=cfg.seed, activation=cfg.controller_activation)
    common = dict(domain=list(cfg.domain), n_samples=cfg.n_samples, max_iters=cfg.max_iters, seed=cfg.seed)
    if method == "AS":
        return train(TrainConfig(loss="as", alpha=cfg.alpha, lr=cfg.as_lr, **common), sys, None, u)
    if method == "ES(+ICNN)":
        V = lyapunov.init_icnn(2, hidden=cfg.icnn_hidden, seed=cfg.seed, knot=cfg.icnn_knot)
    elif method == "ES(+Quadratic)":
        V = lyapunov.init_quadratic(2, hidden=cfg.quadratic_hidden, seed=cfg.seed)
    else:
        raise ConfigurationError(f"unknown harmonic method {method!r}")
    return train(TrainConfig(loss="es", b=cfg.b, lr=cfg.es_lr, **common), sys, V, u)


def run_harmonic(cfg: HarmonicConfig | None = None, methods=HARMONIC_METHODS) -> BenchResult:
    cfg = cfg or HarmonicConfig()
    sys = systems.make_harmonic()
    x0 = _box_sampler(-cfg.x0_box, cfg.x0_box, 2)
    rows, models = [], {}
    row, _ = ensemble_row("harmonic", "uncontrolled", sys, None, x0, cfg.n, cfg.dt, cfg.T, cfg.eps, cfg.seed)
    rows.append(row)
    for method in methods:
        try:
            res = train_harmonic(method, cfg, sys)
        except NscError as exc:
            rows.append({"suite": "harmonic", "method": method, "status": f"error: {exc}"})
            continue
        row, _ = ensemble_row("harmonic", method, sys, res.u, x0, cfg.n, cfg.dt, cfg.T, cfg.eps, cfg.seed)
        row.update(_train_columns(res))
        rows.append(row)
        models[method] = (res.V, res.u)
    return BenchResult("harmonic", rows, {"config": asdict(cfg)}, models)


# --- Stuart-Landau ------------------------------------------------------------------------------


@dataclass
class StuartSingleConfig:
    n: int = 30
    dt: float = 1e-4
    T: float = 1.0
    tol: float = 0.1
    rho_low: float = 1.0
    rho_high: float = 9.0
    alpha: float = 0.5
    domain: tuple = ((-5.0, 5.0),)
    hidden: tuple = (32,)
    activation: str = "smoothed_relu"
    max_iters: int = 10_000
    seed: int = 0


def run_stuart_single(cfg: StuartSingleConfig | None = None) -> BenchResult:
    cfg = cfg or StuartSingleConfig()
    sys = systems.make_stuart_single()
    rho_star = sys.params["rho_star"]
    x0 = _box_sampler(cfg.rho_low - rho_star, cfg.rho_high - rho_star, 1)
    rows = []
    row, ens = ensemble_row("stuart-single", "uncontrolled", sys, None, x0, cfg.n, cfg.dt, cfg.T, cfg.tol, cfg.seed, record_every=100)
    start = np.array([t.states[0, 0] for t in ens.trajectories])
    end = np.array([t.states[-1, 0] for t in ens.trajectories])
    inside = start < 0
    # radius collapse: rho = e + rho* -> 0, i.e. e -> -rho*
    collapsed = float(np.mean(np.abs(end[inside] + rho_star) < cfg.tol)) if inside.any() else math.nan
    rows.append(row)
    rows.append({"suite": "stuart-single", "method": "uncontrolled-inside-to-origin", "n": int(inside.sum()), "value": collapsed, "status": "ok"})

    tcfg = TrainConfig(loss="as", alpha=cfg.alpha, domain=list(cfg.domain), max_iters=cfg.max_iters, seed=cfg.seed)
    res = train(tcfg, sys, None, control.neural_diag(1, hidden=cfg.hidden, seed=cfg.seed, activation=cfg.activation))
    row, _ = ensemble_row("stuart-single", "AS", sys, res.u, x0, cfg.n, cfg.dt, cfg.T, cfg.tol, cfg.seed, record_every=100)
    row.update(_train_columns(res))
    rows.append(row)
    return BenchResult("stuart-single", rows, {"config": asdict(cfg), "inside_fraction": float(inside.mean())}, {"AS": (None, res.u)})


@dataclass
class StuartCoupledConfig:
    n_osc: int = 20
    sigma: float = 0.01
    c1: float = -1.8
    c2: float = 4.0
    channels: int = 1
    n: int = 20
    dt: float = 1e-3
    T: float = 10.0
    tol: float = 0.05
    x0_box: float = 1.0
    alpha: float = 0.5
    domain: tuple = ((-1.0, 1.0),)
    hidden: tuple = (64,)
    max_iters: int = 3000
    seed: int = 0


def run_stuart_coupled(cfg: StuartCoupledConfig | None = None) -> BenchResult:
    cfg = cfg or StuartCoupledConfig()
    n = cfg.n_osc
    sys = systems.make_stuart_coupled(n=n, sigma=cfg.sigma, c1=cfg.c1, c2=cfg.c2, channels=cfg.channels)
    x0 = _box_sampler(-cfg.x0_box, cfg.x0_box, 2 * n)

    def metric(states):
        return systems.sync_error(states, n)

    rows = []
    synced = np.tile(np.array([0.6, -0.3]), n)
    row, ens = ensemble_row("stuart-coupled", "on-manifold", sys, None, synced, 1, cfg.dt, cfg.T, cfg.tol, cfg.seed, record_every=100, metric=metric)
    row["value"] = float(np.max(ens._norms))
    rows.append(row)
    row, _ = ensemble_row("stuart-coupled", "uncontrolled", sys, None, x0, cfg.n, cfg.dt, cfg.T, cfg.tol, cfg.seed, record_every=100, metric=metric)
    rows.append(row)
    tcfg = TrainConfig(loss="as", alpha=cfg.alpha, domain=list(cfg.domain), max_iters=cfg.max_iters, seed=cfg.seed)
    res = train(tcfg, sys, None, control.neural_shift(2 * n, cfg.channels, hidden=cfg.hidden, seed=cfg.seed))
    row, _ = ensemble_row("stuart-coupled", "AS", sys, res.u, x0, cfg.n, cfg.dt, cfg.T, cfg.tol, cfg.seed, record_every=100, metric=metric)
    row.update(_train_columns(res))
    rows.append(row)
    return BenchResult("stuart-coupled", rows, {"config": asdict(cfg)}, {"AS": (None, res.u)})


SUITES = {
    "prop1": (run_prop1, Prop1Config),
    "energy-compare": (run_energy_compare, EnergyConfig),
    "harmonic": (run_harmonic, HarmonicConfig),
    "stuart-single": (run_stuart_single, StuartSingleConfig),
    "stuart-coupled": (run_stuart_coupled, StuartCoupledConfig),
}


def run_suite(name, overrides=None) -> BenchResult:
    try:
        runner, config_cls = SUITES[name]
    except KeyError:
        raise ConfigurationError(f"unknown suite {name!r}; choose from {sorted(SUITES)}") from None
    overrides = overrides or {}
    unknown = set(overrides) - set(config_cls.__dataclass_fields__)
    if unknown:
        raise ConfigurationError(f"suite {name} has no settings {sorted(unknown)}")
    t0 = time.perf_counter()
    result = runner(config_cls(**overrides))
    result.extras["wall_time"] = time.perf_counter() - t0
    return result
