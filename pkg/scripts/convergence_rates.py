"""Energy-error convergence under uniform refinement on the unit square.

Solves the manufactured Poisson and Stokes problems for each element
family on n x n meshes and prints the error table with fitted slopes
against the number of unknowns.

    python3 scripts/convergence_rates.py [--levels 5] [--out results/rates.csv]
"""
import argparse
import csv
from pathlib import Path

from amfem.cli import fit_rate
from amfem.mesh import generate_unit_square
from amfem.problems import make_problem
from amfem.system import energy_error, solve_problem

ELEMENTS = [("rt", 0), ("bdm", 0), ("rt", 1), ("bdm", 1)]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--levels", type=int, default=5)
    parser.add_argument("--problems", nargs="+", default=["poisson", "stokes"])
    parser.add_argument("--out", type=Path, default=Path("results/convergence_rates.csv"))
    args = parser.parse_args()

    rows = []
    for kind in args.problems:
        for family, order in ELEMENTS:
            problem = make_problem(kind, family, order)
            pts = []
            for j in range(args.levels):
                n = 2 ** (j + 1)
                field = solve_problem(generate_unit_square(n), problem)
                ndof = field.dofmap.n_sigma + field.dofmap.n_u
                err = energy_error(field)
                pts.append((ndof, err))
                rows.append({"problem": kind, "element": f"{family.upper()}{order}", "n": n,
                             "ndof": ndof, "err_energy": err})
            slope = fit_rate(pts).slope
            print(f"{kind:8s} {family.upper()}{order}: " + "  ".join(f"{e:.3e}" for _, e in pts)
                  + f"   slope {slope:+.3f}")

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
