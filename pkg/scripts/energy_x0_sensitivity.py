"""How the linear-gain stabilisation transition k* and the mean energies move with
the initial condition on dx = x log(1 + x) dt + u(x) dB.

Used to judge whether the energy-comparison targets can be met by choosing x0;
prints one line per x0 with k*, the linear-k6 mean and median energy.
"""

import argparse

import numpy as np

from nsc import bench, control, systems


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--x0", type=float, nargs="+", default=[2.0, 5.0, 10.0, 20.0, 50.0])
    parser.add_argument("--n", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    sys = systems.make_log1p()
    cfg = bench.EnergyConfig()
    for x0 in args.x0:
        fractions = []
        for k in cfg.sweep:
            row, _ = bench.ensemble_row("sens", "k", sys, control.linear(k), [x0], args.n, cfg.dt, cfg.T, cfg.eps, args.seed, record_every=50)
            fractions.append(row["fraction_converged"])
        k_star = bench.stabilization_transition(cfg.sweep, fractions, cfg.transition_fraction)
        row, ens = bench.ensemble_row("sens", "k6", sys, control.linear(6.0), [x0], args.n, cfg.dt, cfg.T, cfg.eps, args.seed)
        energies = np.array([t.energy for t in ens.trajectories])
        print(f"x0={x0:g}: k*={k_star:g}  k6 mean energy {energies.mean():.4g}  median {np.median(energies):.4g}")


if __name__ == "__main__":
    main()
