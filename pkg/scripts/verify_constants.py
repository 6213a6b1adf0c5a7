"""Empirical stability constants along an adaptive run.

Runs a few adaptive steps and measures discrete reliability,
quasi-orthogonality, Galerkin orthogonality, inf-sup and the
efficiency/reliability band, then writes the report as JSON.

    python3 scripts/verify_constants.py [--problem stokes] [--family bdm] [--steps 5]
"""
import argparse
from pathlib import Path

from amfem.adapt import AfemConfig, afem_run, reference_error
from amfem.system import energy_error
from amfem.verify import run_verification


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--problem", default="poisson", choices=["poisson", "stokes"])
    parser.add_argument("--domain", default="unit_square", choices=["unit_square", "lshape"])
    parser.add_argument("--family", default="rt", choices=["rt", "bdm"])
    parser.add_argument("--order", type=int, default=0)
    parser.add_argument("--steps", type=int, default=5)
    parser.add_argument("--start", type=int, default=4, help="initial subdivisions")
    parser.add_argument("--out", type=Path, default=Path("results/constants.json"))
    args = parser.parse_args()

    source = "manufactured" if args.domain == "unit_square" else "constant"
    cfg = AfemConfig(problem=args.problem, domain=args.domain, family=args.family, order=args.order,
                     source=source, initial_subdivisions=args.start, max_iter=args.steps)
    hist = afem_run(cfg)
    problem = cfg.make_problem()
    if problem.exact_sigma is not None:
        errors = [energy_error(f) for f in hist.fields]
    else:
        errors = reference_error(hist, problem)
    rep = run_verification(problem, hist.meshes, errors=errors)

    print(f"{'pair':>11} {'C_Drel':>8} {'sqrt C0':>8} {'slack':>10}")
    for p in rep.pairs:
        print(f"{p.ntri_coarse:5d}->{p.ntri_fine:<5d} {p.c_drel:8.3f} {p.sqrt_c0:8.3f} {p.pythagoras_slack:10.2e}")
    print(f"c_rel {rep.c_rel:.3f}  c_eff {rep.c_eff:.3f}  inf-sup {[round(b, 4) for b in rep.infsup]}")
    for name, check in rep.checks.items():
        print(f"{name:24s} {'pass' if check['passed'] else 'FAIL'}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    rep.to_json(args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
