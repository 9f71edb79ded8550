"""Run one or more benchmark suites and write bench.csv / summary.json per suite.

    python scripts/run_bench.py harmonic --out results
    python scripts/run_bench.py all --set seed=1
"""

import argparse
import json
from pathlib import Path

from nsc import bench, systems


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("suite", choices=[*sorted(bench.SUITES), "all"])
    parser.add_argument("--out", default="results")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="suite setting override")
    args = parser.parse_args()

    names = sorted(bench.SUITES) if args.suite == "all" else [args.suite]
    overrides = systems.parse_overrides(args.set)
    for name in names:
        result = bench.run_suite(name, overrides)
        out = Path(args.out) / name
        out.mkdir(parents=True, exist_ok=True)
        result.write_csv(out / "bench.csv")
        (out / "summary.json").write_text(json.dumps(result.extras, indent=2, default=str) + "\n")
        print(f"{name}: {result.extras['wall_time']:.0f}s -> {out}")
        for row in result.rows:
            if not str(row["method"]).startswith("sweep-"):
                shown = {k: row[k] for k in ("fraction_converged", "mean_energy", "Di", "Ni", "time_per_iter", "value") if row.get(k) is not None}
                print(f"  {row['method']:<30} {shown}")


if __name__ == "__main__":
    main()
