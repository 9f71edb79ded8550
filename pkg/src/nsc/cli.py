"""Command-line entry point: ``nsc {train,simulate,bounds,bench} ...``.

Settings resolve as built-in defaults < ``--config`` JSON < explicit flags.  A
``manifest.json`` written by any command is itself a valid ``--config``, so
replaying a run is ``nsc <command> --config out/manifest.json --out-dir again``.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__, bench, bounds, control, lyapunov, systems
from .errors import BoundInapplicableError, ConfigurationError, DivergenceError, NonFiniteLossError, NscError
from .sde import ensemble
from .train import TrainConfig, report_to_json, train

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_NOT_CONVERGED = 0, 2, 3, 4


class UsageError(NscError):
    pass


def _default_seed() -> int:
    raw = os.environ.get("NSC_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"NSC_SEED must be an integer, got {raw!r}") from None


def _defaults(command):
    seed = _default_seed()
    if command == "train":
        return dict(
            system=None, set=[], loss="as", alpha=0.5, b=2.5, drift_factor=2, lyapunov="icnn", v_hidden=[32, 32],
            v_eps=1e-3, v_knot=0.1, controller="shift", hidden=[32], activation="tanh", knot=0.1, domain=[[-5.0, 5.0]],
            n_samples=500, fixed_batch=False, max_iters=2000, zero_streak=10, lr=0.01, lr_decay=1.0, lr_decay_every=0,
            seed=seed, checkpoint_every=0,
        )
    if command == "simulate":
        return dict(
            system=None, set=[], controller_file=None, linear_k=None, x0=None, x0_box=[-1.0, 1.0], n=20, dt=1e-3, T=1.0,
            eps=0.05, seed=seed, record_every=1,
        )
    if command == "bounds":
        return dict(
            theorem=None, system=None, set=[], controller_file=None, lyapunov_file=None, k=None, L=None, k_u=None,
            lipschitz="upper", alpha=0.5, delta=None, c1=None, c2=None, c3=None, p=None, x0=None, eps=0.1,
            domain=[[-5.0, 5.0]], n_samples=10_000, validate=False, n=500, dt=1e-3, seed=seed,
        )
    if command == "bench":
        return dict(suite=None, set=[], seed=seed)
    raise UsageError(f"unknown command {command!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nsc", description="Neural stochastic control toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(p):
        p.add_argument("--config", default=S, help="JSON settings (or a manifest.json) merged under explicit flags")
        p.add_argument("--out-dir", default=S, required=True)
        p.add_argument("--seed", type=int, default=S, help="base seed (default: $NSC_SEED or 0)")

    def system(p):
        p.add_argument("--system", default=S, help=f"one of {sorted(systems.CATALOGUE)}")
        p.add_argument("--set", action="append", default=S, metavar="KEY=VALUE", help="system parameter override")

    p = sub.add_parser("train", help="train a controller (and Lyapunov function for ES)", argument_default=S)
    common(p)
    system(p)
    p.add_argument("--loss", choices=["es", "as"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--drift-factor", type=int, choices=[1, 2])
    p.add_argument("--lyapunov", choices=["icnn", "quadratic"])
    p.add_argument("--v-hidden", type=int, nargs="+")
    p.add_argument("--v-eps", type=float)
    p.add_argument("--v-knot", type=float)
    p.add_argument("--controller", choices=["shift", "diag"])
    p.add_argument("--hidden", type=int, nargs="+")
    p.add_argument("--activation", choices=["tanh", "smoothed_relu"])
    p.add_argument("--knot", type=float)
    p.add_argument("--domain", type=float, nargs=2, action="append", metavar=("LO", "HI"), help="repeat per dimension or give once")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--fixed-batch", action="store_true")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--zero-streak", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--lr-decay-every", type=int)
    p.add_argument("--checkpoint-every", type=int)

    p = sub.add_parser("simulate", help="simulate an ensemble", argument_default=S)
    common(p)
    system(p)
    p.add_argument("--controller-file")
    p.add_argument("--linear-k", type=float)
    p.add_argument("--x0", type=float, nargs="+")
    p.add_argument("--x0-box", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--n", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--T", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--record-every", type=int)

    p = sub.add_parser("bounds", help="convergence-time and energy bounds", argument_default=S)
    common(p)
    system(p)
    p.add_argument("--theorem", type=int, choices=[3, 4, 5])
    p.add_argument("--controller-file")
    p.add_argument("--lyapunov-file")
    p.add_argument("--k", type=float)
    p.add_argument("--L", type=float)
    p.add_argument("--k-u", type=float)
    p.add_argument("--lipschitz", choices=["upper", "empirical"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--c1", type=float)
    p.add_argument("--c2", type=float)
    p.add_argument("--c3", type=float)
    p.add_argument("--p", type=float)
    p.add_argument("--x0", type=float, nargs="+")
    p.add_argument("--eps", type=float)
    p.add_argument("--domain", type=float, nargs=2, action="append", metavar=("LO", "HI"))
    p.add_argument("--n-samples", type=int)
    p.add_argument("--validate", action="store_true")
    p.add_argument("--n", type=int)
    p.add_argument("--dt", type=float)

    p = sub.add_parser("bench", help="reproduce a benchmark table", argument_default=S)
    p.add_argument("suite", choices=sorted(bench.SUITES))
    common(p)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="suite setting override")
    return parser


def resolve(command, ns: argparse.Namespace) -> dict:
    explicit = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    cfg = _defaults(command)
    config_path = getattr(ns, "config", None)
    if config_path is not None:
        loaded = json.loads(Path(config_path).read_text())
        if "command" in loaded and "config" in loaded:
            if loaded["command"] != command:
                raise UsageError(f"manifest is for {loaded['command']!r}, not {command!r}")
            loaded = loaded["config"]
        unknown = set(loaded) - set(cfg) - {"out_dir"}
        if unknown:
            raise UsageError(f"unknown settings in {config_path}: {sorted(unknown)}")
        cfg.update(loaded)
    cfg.update(explicit)
    return cfg


# --- helpers ---------------------------------------------------------------------------------


def _git_stamp():
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _manifest(out: Path, command, cfg, outputs, seeds):
    persisted = {k: v for k, v in cfg.items() if k != "out_dir"}
    _write_json(
        out / "manifest.json",
        {
            "command": command,
            "config": persisted,
            "seeds": seeds,
            "version": __version__,
            "git": _git_stamp(),
            "outputs": sorted(str(p) for p in outputs),
        },
    )


def _system(cfg):
    if not cfg.get("system"):
        raise UsageError("--system is required")
    return systems.get_system(cfg["system"], **systems.parse_overrides(cfg["set"]))


def _domain(cfg):
    return [tuple(lohi) for lohi in cfg["domain"]]


def _load_controller(path, sys):
    u = control.controller_from_dict(json.loads(Path(path).read_text()))
    if u.d != sys.d or u.r != sys.r:
        raise ConfigurationError(f"controller is ({u.d}, {u.r}) but {sys.label} needs ({sys.d}, {sys.r})")
    return u


# --- commands --------------------------------------------------------------------------------


def cmd_train(cfg, out: Path) -> int:
    sys_ = _system(cfg)
    tcfg = TrainConfig(
        loss=cfg["loss"], b=cfg["b"], alpha=cfg["alpha"], drift_factor=cfg["drift_factor"], domain=_domain(cfg),
        n_samples=cfg["n_samples"], resample=not cfg["fixed_batch"], max_iters=cfg["max_iters"],
        zero_streak=cfg["zero_streak"], seed=cfg["seed"], lr=cfg["lr"], lr_decay=cfg["lr_decay"],
        lr_decay_every=cfg["lr_decay_every"],
    )
    hidden = tuple(cfg["hidden"])
    if cfg["controller"] == "diag":
        u = control.neural_diag(sys_.d, hidden=hidden, seed=cfg["seed"], activation=cfg["activation"], knot=cfg["knot"])
    else:
        u = control.neural_shift(sys_.d, sys_.r, hidden=hidden, seed=cfg["seed"], activation=cfg["activation"], knot=cfg["knot"])
    V = None
    if cfg["loss"] == "es":
        d_target = sys_.d if sys_.error_map is None else np.asarray(sys_.error_map).shape[0]
        if cfg["lyapunov"] == "icnn":
            V = lyapunov.init_icnn(d_target, hidden=tuple(cfg["v_hidden"]), seed=cfg["seed"], knot=cfg["v_knot"], eps=cfg["v_eps"])
        else:
            V = lyapunov.init_quadratic(d_target, hidden=tuple(cfg["v_hidden"]), seed=cfg["seed"], eps=cfg["v_eps"])

    outputs = [out / "log.jsonl", out / "controller.json", out / "summary.json"]
    every = cfg["checkpoint_every"]
    ckpt = out / "checkpoints"
    log = (out / "log.jsonl").open("w")

    def on_iteration(report, V_cur, u_cur):
        log.write(json.dumps(report_to_json(report)) + "\n")
        if every and (report.iteration + 1) % every == 0:
            ckpt.mkdir(exist_ok=True)
            tag = f"{report.iteration + 1:06d}"
            _write_json(ckpt / f"controller_{tag}.json", control.controller_to_dict(u_cur))
            if V_cur is not None:
                _write_json(ckpt / f"lyapunov_{tag}.json", lyapunov.lyapunov_to_dict(V_cur))

    try:
        res = train(tcfg, sys_, V, u, callback=on_iteration)
    finally:
        log.close()
    _write_json(out / "controller.json", control.controller_to_dict(res.u))
    if res.V is not None:
        _write_json(out / "lyapunov.json", lyapunov.lyapunov_to_dict(res.V))
        outputs.append(out / "lyapunov.json")
    summary = {
        "converged": res.converged,
        "iterations": res.iterations,
        "final_loss": res.final_loss,
        "best_loss": min(r.loss for r in res.reports),
        "training_time": float(sum(r.wall_time for r in res.reports)),
        "time_per_iteration": res.time_per_iteration(),
    }
    _write_json(out / "summary.json", summary)
    _manifest(out, "train", cfg, outputs, {"seed": cfg["seed"]})
    print(json.dumps(summary))
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def cmd_simulate(cfg, out: Path) -> int:
    sys_ = _system(cfg)
    if cfg["controller_file"] and cfg["linear_k"] is not None:
        raise UsageError("give at most one of --controller-file and --linear-k")
    u = None
    if cfg["controller_file"]:
        u = _load_controller(cfg["controller_file"], sys_)
    elif cfg["linear_k"] is not None:
        u = control.linear(cfg["linear_k"], d=sys_.d, r=1 if sys_.r == 1 else sys_.d)
        if u.r != sys_.r:
            raise ConfigurationError(f"a linear controller cannot supply r={sys_.r} channels")
    if cfg["x0"] is not None:
        x0 = np.asarray(cfg["x0"], dtype=float)
        if x0.size != sys_.d:
            raise ConfigurationError(f"--x0 has {x0.size} values, system has d={sys_.d}")
    else:
        lo, hi = cfg["x0_box"]
        d = sys_.d

        def x0(rng):
            return rng.uniform(lo, hi, d)

    ens = ensemble(sys_, u, x0, cfg["n"], dt=cfg["dt"], T=cfg["T"], eps=cfg["eps"], base_seed=cfg["seed"], record_every=cfg["record_every"])
    summary = ens.summary()
    ens.write(out)
    outputs = [out / "summary.json"] + [out / f"traj_{i}.csv" for i in range(ens.n)]
    _manifest(out, "simulate", cfg, outputs, {"base_seed": cfg["seed"], "trajectory_seeds": [cfg["seed"], cfg["seed"] + ens.n - 1]})
    print(json.dumps({k: summary[k] for k in ("fraction_converged", "mean_hitting_time", "mean_energy", "Di", "n_diverged")}))
    return EXIT_DIVERGED if ens.n_diverged else EXIT_OK


def _norm_x0(cfg):
    if cfg["x0"] is None:
        raise UsageError("--x0 is required")
    x0 = np.asarray(cfg["x0"], dtype=float)
    return x0, float(np.linalg.norm(x0))


def cmd_bounds(cfg, out: Path) -> int:
    theorem = cfg["theorem"]
    if theorem is None:
        raise UsageError("--theorem is required")
    x0, x0_norm = _norm_x0(cfg)
    eps = cfg["eps"]
    sys_ = _system(cfg) if cfg.get("system") else None
    dom = _domain(cfg)
    validity, inputs, bound, mc = {}, {"x0_norm": x0_norm, "eps": eps}, None, None
    u = _load_controller(cfg["controller_file"], sys_) if (cfg["controller_file"] and sys_ is not None) else None

    if cfg["L"] is not None:
        L = cfg["L"]
    elif sys_ is not None:
        est = bounds.estimate_L(sys_, dom, cfg["n_samples"], cfg["seed"])
        L = est.value
        inputs["L_at"] = est.at
    else:
        raise UsageError("give --L or --system")
    inputs["L"] = L

    def gain():
        if cfg["k_u"] is not None:
            return cfg["k_u"]
        if u is None:
            return 0.0
        if cfg["lipschitz"] == "empirical":
            return bounds.controller_lipschitz_empirical(u, dom, seed=cfg["seed"])
        radius = float(np.max(np.abs(np.asarray(dom))))
        return bounds.controller_lipschitz_upper(u, radius=radius * np.sqrt(u.d))

    try:
        if theorem == 3:
            if cfg["k"] is None:
                raise UsageError("theorem 3 needs --k")
            inputs["k"] = cfg["k"]
            bound = bounds.thm3_bounds(L, cfg["k"], x0_norm, eps)
            if sys_ is None:
                # the extremal drift f(x) = L x attains <x, f> = L |x|^2 everywhere
                sys_ = systems.make_gbm(a=L, b=0.0) if x0.size == 1 else None
            u = control.linear(cfg["k"], d=x0.size) if sys_ is not None else None
        elif theorem == 4:
            if sys_ is None or cfg["lyapunov_file"] is None:
                raise UsageError("theorem 4 needs --system, --controller-file and --lyapunov-file")
            V = lyapunov.lyapunov_from_dict(json.loads(Path(cfg["lyapunov_file"]).read_text()))
            est = bounds.estimate_es_constants(V, sys_, u, dom, cfg["n_samples"], cfg["seed"])
            c1 = est.c1 if cfg["c1"] is None else cfg["c1"]
            c2 = est.c2 if cfg["c2"] is None else cfg["c2"]
            c3 = est.c3 if cfg["c3"] is None else cfg["c3"]
            p = est.p if cfg["p"] is None else cfg["p"]
            validity["es_constants"] = bool(c3 - 2 * c2 > 0)
            V_x0 = float(V(sys_.error(x0)))
            k_u = gain()
            inputs.update(c1=c1, c2=c2, c3=c3, p=p, V_x0=V_x0, k_u=k_u, c2_at=est.c2_at, c3_at=est.c3_at)
            bound = bounds.thm4_bounds(c1, c2, c3, p, V_x0, L, k_u, x0_norm, eps)
        else:
            if sys_ is None:
                raise UsageError("theorem 5 needs --system")
            alpha = cfg["alpha"]
            if cfg["delta"] is not None:
                delta = cfg["delta"]
            else:
                est = bounds.estimate_delta_eps(sys_, u, alpha, eps, dom, cfg["n_samples"], cfg["seed"])
                delta = est.delta
                inputs["delta_at"] = est.at
            validity["delta_eps"] = bool(delta > 0)
            k_u = gain()
            inputs.update(alpha=alpha, delta_eps=delta, k_u=k_u)
            bound = bounds.thm5_bounds(alpha, delta, L, k_u, x0_norm, eps)
        validity["applicable"] = True
    except BoundInapplicableError as exc:
        validity.update(applicable=False, reason=str(exc))
        bound = None

    if cfg["validate"] and bound is not None:
        if sys_ is None:
            raise UsageError("--validate needs --system (or a 1-D x0 for theorem 3)")
        mc = bounds.validate_bound(sys_, u, bound.T_eps, x0, eps, n=cfg["n"], dt=cfg["dt"], base_seed=cfg["seed"])
    report = bounds.bound_report(theorem, inputs, bound, validity, mc)
    _write_json(out / "summary.json", report)
    _manifest(out, "bounds", cfg, [out / "summary.json"], {"seed": cfg["seed"]})
    print(json.dumps({"T_eps": report["T_eps"], "energy_bound": report["energy_bound"], "valid": validity["applicable"], "monte_carlo": report["monte_carlo"]}))
    return EXIT_OK


def cmd_bench(cfg, out: Path) -> int:
    overrides = systems.parse_overrides(cfg["set"])
    overrides.setdefault("seed", cfg["seed"])
    result = bench.run_suite(cfg["suite"], overrides)
    result.write_csv(out / "bench.csv")
    _write_json(out / "summary.json", result.extras)
    _manifest(out, "bench", cfg, [out / "bench.csv", out / "summary.json"], {"seed": overrides["seed"]})
    for row in result.rows:
        if not str(row["method"]).startswith("sweep-"):
            print(row["method"], {k: row[k] for k in ("fraction_converged", "mean_energy", "Tt", "Di", "value") if row.get(k) is not None})
    return EXIT_OK


COMMANDS = {"train": cmd_train, "simulate": cmd_simulate, "bounds": cmd_bounds, "bench": cmd_bench}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(ns.command, ns)
        out = Path(cfg["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[ns.command](cfg, out)
    except (UsageError, ConfigurationError) as exc:
        print(f"nsc {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, NonFiniteLossError) as exc:
        print(f"nsc {ns.command}: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
