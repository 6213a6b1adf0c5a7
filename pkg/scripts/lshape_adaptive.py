"""Adaptive against uniform refinement on the L-shaped domain (f = 1).

Writes both histories as CSV and prints the fitted slopes of
eta^2 + osc^2 against the number of unknowns.

    python3 scripts/lshape_adaptive.py [--theta 0.3] [--max-dofs 20000] [--uniform-dofs 200000]
"""
import argparse
from pathlib import Path

import numpy as np

from amfem.adapt import AfemConfig, afem_run, uniform_run
from amfem.cli import fit_rate, tail_points


def slope(hist, last):
    total = hist.column("eta2") + hist.column("osc2")
    return fit_rate(np.column_stack([hist.column("ndof"), total])[-last:]).slope


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--problem", default="poisson", choices=["poisson", "stokes"])
    parser.add_argument("--family", default="rt", choices=["rt", "bdm"])
    parser.add_argument("--order", type=int, default=0)
    parser.add_argument("--theta", type=float, default=0.3)
    parser.add_argument("--max-dofs", type=int, default=20_000)
    parser.add_argument("--uniform-dofs", type=int, default=200_000)
    parser.add_argument("--out", type=Path, default=Path("results/lshape"))
    args = parser.parse_args()

    common = dict(problem=args.problem, domain="lshape", family=args.family, order=args.order,
                  source="constant", initial_subdivisions=1)
    adaptive = afem_run(AfemConfig(theta=args.theta, max_dofs=args.max_dofs, **common), keep_fields=False)
    uniform = uniform_run(AfemConfig(max_dofs=args.uniform_dofs, **common), keep_fields=False)

    args.out.mkdir(parents=True, exist_ok=True)
    adaptive.to_csv(args.out / "adaptive.csv")
    uniform.to_csv(args.out / "uniform.csv")

    print(f"{'k':>3} {'ndof':>8} {'eta2':>11} {'osc2':>11} {'marked':>7}")
    for r in adaptive.records:
        print(f"{r.k:3d} {r.ndof:8d} {r.eta2:11.4e} {r.osc2:11.4e} {r.nmarked:7d}")
    s_ad = slope(adaptive, 6)
    s_un = slope(uniform, tail_points(len(uniform)))
    print(f"adaptive slope (last 6): {s_ad:+.3f}")
    print(f"uniform slope (last {tail_points(len(uniform))}): {s_un:+.3f}")
    print(f"gap in eta units: {(s_un - s_ad) / 2:.3f}")
    print(f"histories written to {args.out}")


if __name__ == "__main__":
    main()
