"""Numerical checks of the discrete stability and convergence estimates.

Every check is one-sided: it measures the ratio that a bound controls and
reports it as an empirical constant.  Where the exact stress would be
needed, a reference solution two uniform refinements beyond the finer mesh
stands in for it.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .estimator import estimate
from .mesh import Mesh, locate, refined_elements, refined_neighborhood, uniform_refine
from .problems import Problem
from .spaces import (
    DofMap,
    FieldPair,
    build_dofmap,
    discrete_h1_matrix,
    divergence_coefficients,
    divergence_matrix,
    displacement_mass,
    project_source,
    prolong_displacement,
    prolong_stress,
)
from .system import MaterialOperator, assemble, energy_norm, solve, stress_mass, trace_row

__all__ = [
    "ConstantsReport",
    "DENSE_LIMIT",
    "KERNEL_LIMIT",
    "PairReport",
    "check_coercivity",
    "check_discrete_reliability",
    "check_efficiency_reliability",
    "check_orthogonality",
    "check_quasi_orthogonality",
    "estimate_infsup",
    "kernel_basis",
    "run_verification",
]

KERNEL_LIMIT = 500
DENSE_LIMIT = 2000
# on coarser meshes every element touches the boundary and the constant is preasymptotic
INFSUP_MIN_TRIANGLES = 16
REFERENCE_NOTE = "exact stress replaced by a solution two uniform refinements finer"


class CheckError(RuntimeError):
    pass


def kernel_basis(mesh: Mesh, dofmap: DofMap) -> np.ndarray:
    """L2-orthonormal basis of discrete stresses with zero divergence
    (and zero mean trace for Stokes), as columns."""
    if dofmap.n_sigma > KERNEL_LIMIT:
        raise CheckError(f"kernel oracle limited to {KERNEL_LIMIT} stress dofs, got {dofmap.n_sigma}")
    C = divergence_matrix(mesh, dofmap).toarray()
    if dofmap.kind == "stokes":
        C = np.vstack([C, trace_row(mesh, dofmap)])
    Z = sla.null_space(C)
    if Z.shape[1] == 0:
        return Z
    G = Z.T @ stress_mass(mesh, dofmap, MaterialOperator.IDENTITY).toarray() @ Z
    L = np.linalg.cholesky(G)
    return sla.solve_triangular(L, Z.T, lower=True).T


def check_orthogonality(field: FieldPair) -> float:
    """max |(A sigma_h, tau_h)| over an orthonormal basis of the kernel."""
    Z = kernel_basis(field.mesh, field.dofmap)
    if Z.shape[1] == 0:
        return 0.0
    r = Z.T @ (stress_mass(field.mesh, field.dofmap) @ field.sigma)
    return float(np.abs(r).max())


def _ratio(num: float, den: float, tol: float = 1e-24) -> float:
    if den > tol:
        return num / den
    return 0.0 if num <= tol else math.inf


def _stress_distance(fine: FieldPair, coarse: FieldPair, parent=None) -> float:
    """||sigma_fine - sigma_coarse||_A on the fine mesh."""
    p = prolong_stress(coarse.mesh, coarse.dofmap, coarse.sigma, fine.mesh, fine.dofmap, parent)
    return energy_norm(fine.mesh, fine.dofmap, fine.sigma - p)


@dataclass
class PairReport:
    """Measurements on one nested mesh pair."""

    ntri_coarse: int
    ntri_fine: int
    c_drel: float = math.nan
    drel_numerator: float = math.nan
    drel_denominator: float = math.nan
    sqrt_c0: float = math.nan
    osc_refined: float = math.nan
    intermediate_distance: float = math.nan
    div_identity_error: float = math.nan
    pythagoras_slack: float = math.nan
    passed: bool = True
    notes: list = field(default_factory=list)


def check_discrete_reliability(coarse: Mesh, fine: Mesh, problem: Problem,
                               coarse_field: FieldPair | None = None,
                               fine_field: FieldPair | None = None) -> PairReport:
    """||sigma_h - sigma_H||_A^2 / (eta^2(sigma_H, neighbourhood) + osc^2(refined))."""
    fH = coarse_field or solve(assemble(coarse, problem))
    fh = fine_field or solve(assemble(fine, problem))
    ind = estimate(fH)
    num = _stress_distance(fh, fH) ** 2
    den = ind.total(refined_neighborhood(coarse, fine))[0] + ind.total(refined_elements(coarse, fine))[1]
    rep = PairReport(coarse.n_triangles, fine.n_triangles, drel_numerator=num, drel_denominator=den)
    rep.c_drel = _ratio(num, den)
    rep.passed = math.isfinite(rep.c_drel)
    return rep


def check_quasi_orthogonality(coarse: Mesh, fine: Mesh, problem: Problem, delta: float = 0.5,
                              coarse_field: FieldPair | None = None,
                              fine_field: FieldPair | None = None,
                              reference: FieldPair | None = None) -> PairReport:
    """Intermediate problem with the coarse datum, and the perturbed
    Pythagoras inequality against a reference solution."""
    parent = locate(coarse, fine)
    fH = coarse_field or solve(assemble(coarse, problem))
    sys_h = assemble(fine, problem)
    fh = fine_field or solve(sys_h)
    k = problem.element.order
    n_comp = problem.n_components
    # coarse projection of f, represented exactly on the fine mesh
    qH = project_source(coarse, problem.source, k, n_comp).ravel()
    cdm = build_dofmap(coarse, problem.element, problem.kind)
    qH_fine = prolong_displacement(coarse, cdm, qH, fine, sys_h.dofmap, parent)
    ft = solve(sys_h, rhs=displacement_mass(fine, sys_h.dofmap) @ qH_fine)
    rep = PairReport(coarse.n_triangles, fine.n_triangles)
    div = divergence_coefficients(fine, ft.dofmap, ft.sigma)
    rep.div_identity_error = float(np.abs(div - qH_fine).max() / max(np.abs(qH_fine).max(), 1.0))
    rep.intermediate_distance = energy_norm(fine, fh.dofmap, fh.sigma - ft.sigma)
    ind = estimate(fH)
    osc2 = ind.total(refined_elements(coarse, fine))[1]
    rep.osc_refined = math.sqrt(osc2)
    rep.sqrt_c0 = _ratio(rep.intermediate_distance, rep.osc_refined, 1e-12)
    if reference is None:
        reference = solve(assemble(uniform_refine(fine, 2), problem))
    e_h = _stress_distance(reference, fh)
    e_H = _stress_distance(reference, fH)
    d_hH = _stress_distance(fh, fH, parent)
    c0 = rep.sqrt_c0**2 if math.isfinite(rep.sqrt_c0) else 0.0
    rhs = e_H**2 - d_hH**2 + c0 / delta * osc2
    rep.pythagoras_slack = rhs - (1 - delta) * e_h**2
    tol = 1e-10 * max(e_H**2, 1e-300)
    rep.passed = (math.isfinite(rep.sqrt_c0) and rep.div_identity_error <= 1e-10
                  and rep.pythagoras_slack >= -tol)
    rep.notes.append(REFERENCE_NOTE)
    return rep


def estimate_infsup(mesh: Mesh, problem: Problem | None = None, dofmap: DofMap | None = None) -> float:
    """Discrete inf-sup constant of the divergence between the L2 stress
    norm and the mesh-dependent H1 displacement norm.

    Computed as the square root of the smallest generalized eigenvalue of
    ``B M^-1 B^T v = lambda D v``; for Stokes the stresses are restricted
    to zero mean trace.
    """
    if dofmap is None:
        dofmap = build_dofmap(mesh, problem.element, problem.kind)
    if dofmap.n_total > DENSE_LIMIT:
        raise CheckError(f"inf-sup oracle limited to {DENSE_LIMIT} dofs, got {dofmap.n_total}")
    M = stress_mass(mesh, dofmap, MaterialOperator.IDENTITY).toarray()
    B = divergence_matrix(mesh, dofmap).toarray()
    D = discrete_h1_matrix(mesh, dofmap).toarray()
    if dofmap.kind == "stokes":
        Z = sla.null_space(trace_row(mesh, dofmap)[None, :])
        M = Z.T @ M @ Z
        B = B @ Z
    S = B @ np.linalg.solve(M, B.T)
    lam = sla.eigh(S, D, eigvals_only=True)
    return float(np.sqrt(max(lam.min(), 0.0)))


def check_coercivity(mesh: Mesh, problem: Problem) -> float:
    """Smallest ||tau||_A / ||tau|| over the discrete kernel."""
    dm = build_dofmap(mesh, problem.element, problem.kind)
    Z = kernel_basis(mesh, dm)
    if Z.shape[1] == 0:
        return math.inf
    A = Z.T @ stress_mass(mesh, dm).toarray() @ Z
    return float(np.sqrt(max(np.linalg.eigvalsh(A).min(), 0.0)))


def check_efficiency_reliability(errors, eta2, osc2, band: float = 10.0) -> dict:
    """Empirical reliability and efficiency constants of a run.

    c_rel = max err^2/(eta^2+osc^2), c_eff = min err^2/eta^2, and the band
    max/min of err^2/eta^2 across levels.
    """
    e2 = np.asarray(errors, float) ** 2
    eta2 = np.asarray(eta2, float)
    osc2 = np.asarray(osc2, float)
    if np.all(e2 == 0) and np.all(eta2 == 0):
        return {"c_rel": 0.0, "c_eff": 0.0, "band": 1.0, "passed": True}
    if np.any(eta2 <= 0) or np.any(e2 <= 0):
        raise CheckError("degenerate run: zero error or estimator on some level")
    r = e2 / eta2
    out = {"c_rel": float(np.max(e2 / (eta2 + osc2))), "c_eff": float(r.min()),
           "band": float(r.max() / r.min())}
    out["passed"] = bool(out["band"] <= band)
    return out


@dataclass
class ConstantsReport:
    """Empirical constants with the meshes they were measured on."""

    problem: str
    element: str
    c_rel: float = math.nan
    c_eff: float = math.nan
    c_drel: float = math.nan
    c_0: float = math.nan
    infsup: list = field(default_factory=list)
    pairs: list[PairReport] = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    note: str = REFERENCE_NOTE

    @property
    def passed(self) -> bool:
        return all(c.get("passed", False) for c in self.checks.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, default=float)
        if path is not None:
            Path(path).write_text(text)
        return text


def _variation(values) -> float:
    v = np.asarray([x for x in values if np.isfinite(x) and x > 0])
    return float(v.max() / v.min()) if len(v) else math.nan


def run_verification(problem: Problem, meshes: list[Mesh], infsup_mesh: Mesh | None = None,
                     infsup_levels: int = 3, errors=None) -> ConstantsReport:
    """Run every check on consecutive pairs of a nested mesh sequence."""
    rep = ConstantsReport(problem.kind, str(problem.element))
    fields = [solve(assemble(m, problem)) for m in meshes]
    for (mH, mh), (fH, fh) in zip(zip(meshes, meshes[1:]), zip(fields, fields[1:])):
        dr = check_discrete_reliability(mH, mh, problem, fH, fh)
        qo = check_quasi_orthogonality(mH, mh, problem, coarse_field=fH, fine_field=fh)
        qo.c_drel, qo.drel_numerator, qo.drel_denominator = dr.c_drel, dr.drel_numerator, dr.drel_denominator
        qo.passed = qo.passed and dr.passed
        rep.pairs.append(qo)
    drel = [p.c_drel for p in rep.pairs]
    sc0 = [p.sqrt_c0 for p in rep.pairs]
    if rep.pairs:
        rep.c_drel = float(np.nanmax(drel))
        rep.c_0 = float(np.nanmax(sc0)) ** 2
        rep.checks["discrete_reliability"] = {
            "values": drel, "variation": _variation(drel),
            "passed": all(p.passed for p in rep.pairs) and not _variation(drel) >= 10}
        rep.checks["quasi_orthogonality"] = {
            "values": sc0, "variation": _variation(sc0),
            "passed": all(p.passed for p in rep.pairs) and not _variation(sc0) >= 10}
    orth = [check_orthogonality(f) for f in fields if f.dofmap.n_sigma <= KERNEL_LIMIT]
    if orth:
        rep.checks["orthogonality"] = {"values": orth, "passed": max(orth) <= 1e-9}
    base = infsup_mesh if infsup_mesh is not None else meshes[0]
    while infsup_mesh is None and base.n_triangles < INFSUP_MIN_TRIANGLES:
        base = uniform_refine(base, 1)
    levels = [uniform_refine(base, j) for j in range(infsup_levels)]
    rep.infsup = [estimate_infsup(m, problem) for m in levels
                  if build_dofmap(m, problem.element, problem.kind).n_total <= DENSE_LIMIT]
    if rep.infsup:
        var = max(rep.infsup) / min(rep.infsup) - 1 if min(rep.infsup) > 0 else math.inf
        rep.checks["infsup"] = {"values": rep.infsup, "variation": var,
                                "passed": min(rep.infsup) > 0 and var < 0.2}
    if errors is not None:
        eta2 = [estimate(f).total()[0] for f in fields]
        osc2 = [estimate(f).total()[1] for f in fields]
        er = check_efficiency_reliability(errors, eta2, osc2)
        rep.c_rel, rep.c_eff = er["c_rel"], er["c_eff"]
        rep.checks["efficiency_reliability"] = er
    return rep
