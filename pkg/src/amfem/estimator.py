"""Residual error indicators and data oscillation.

For each triangle K

    eta^2(K) = |K| ||rot(A sigma_h)||_K^2 + sum_{E in K} |E| ||[A sigma_h . t_E]||_E^2
    osc^2(K) = |K| ||f - Q_h f||_K^2

with ``h_K = |K|^(1/2)``.  rot acts row by row for Stokes.  An interior
edge contributes to both neighbours; a boundary edge uses the one-sided
trace.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .elements import displacement_basis, edge_quadrature, eval_monomials, monomials, quadrature
from .mesh import Mesh, locate
from .spaces import (
    FieldPair,
    _coarse_ref_coords,
    _source_values,
    edge_ref_points,
    edge_values,
    polynomial_jacobian,
    project_source,
    stress_basis,
    stress_polynomials,
)
from .system import MaterialOperator

__all__ = [
    "IndicatorSet",
    "estimate",
    "frozen_indicators",
    "indicators",
    "oscillation",
    "stress_indicators",
]


@dataclass(frozen=True, eq=False)
class IndicatorSet:
    eta2: np.ndarray
    osc2: np.ndarray
    mesh: Mesh | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.eta2.shape != self.osc2.shape:
            raise ValueError("indicator arrays differ in length")

    def __len__(self) -> int:
        return len(self.eta2)

    @property
    def combined(self) -> np.ndarray:
        return self.eta2 + self.osc2

    def total(self, subset=None) -> tuple[float, float]:
        """(eta^2, osc^2) summed over ``subset`` (all elements by default)."""
        if subset is None:
            return float(self.eta2.sum()), float(self.osc2.sum())
        idx = np.asarray(list(subset) if not isinstance(subset, np.ndarray) else subset, np.int64)
        if idx.size == 0:
            return 0.0, 0.0
        if idx.min() < 0 or idx.max() >= len(self):
            raise IndexError("subset index out of range")
        idx = np.unique(idx)
        return float(self.eta2[idx].sum()), float(self.osc2[idx].sum())

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["element_id", "eta2", "osc2"])
            for i, (e, o) in enumerate(zip(self.eta2, self.osc2)):
                w.writerow([i, repr(float(e)), repr(float(o))])


def stress_indicators(mesh: Mesh, poly: np.ndarray, kind: str, degree: int) -> np.ndarray:
    """eta^2(K) for per-element stress polynomials ``poly`` (M, R, 2, n_mono)
    of total degree ``degree`` in reference coordinates."""
    exps = monomials(degree)
    op = MaterialOperator.for_kind(kind)
    apoly = op.apply(poly, row_axis=1) if kind == "stokes" else poly
    det = mesh.jacobian[1]
    eta2 = np.zeros(mesh.n_triangles)
    if degree > 0:
        q = quadrature(2 * degree - 2)
        D = polynomial_jacobian(mesh, apoly, exps, q.points)  # (M, R, c, k, nq)
        rot = D[:, :, 1, 0] - D[:, :, 0, 1]
        eta2 += mesh.areas * np.einsum("mrq,q,m->m", rot**2, q.weights, det)
    s, w = edge_quadrature(2 * degree)
    tris, pts = edge_ref_points(mesh, s)
    vals = edge_values(apoly, exps, tris, pts)  # (E, 2, R, 2, ns)
    tbl = mesh.edges
    tan = np.einsum("ekrcq,ec->ekrq", vals, tbl.tangent)
    jump = tan[:, 0] - np.where(tbl.boundary[:, None, None], 0.0, tan[:, 1])
    # h_E ||.||_E^2 = |E|^2 * reference-edge integral
    contrib = tbl.length**2 * np.einsum("erq,q->e", jump**2, w)
    np.add.at(eta2, tbl.tris[:, 0], contrib)
    inner = ~tbl.boundary
    np.add.at(eta2, tbl.tris[inner, 1], contrib[inner])
    return eta2


def indicators(field: FieldPair) -> np.ndarray:
    """Per-element eta^2 of a discrete stress on its own mesh."""
    mesh, dm = field.mesh, field.dofmap
    poly = stress_polynomials(mesh, dm, field.sigma)
    return stress_indicators(mesh, poly, dm.kind, dm.element.degree)


def oscillation(mesh: Mesh, f: Callable, order: int, n_components: int = 1) -> np.ndarray:
    """Per-element osc^2 with quadrature of degree 2k+4."""
    deg = 2 * order + 4
    q = quadrature(deg)
    coef = project_source(mesh, f, order, n_components, degree=deg)  # (R, M, nP)
    fh = coef @ displacement_basis(order).values(q.points)  # (R, M, nq)
    vals = _source_values(f, mesh.to_physical(q.points), n_components)  # (M, R, nq)
    r = vals - np.moveaxis(fh, 0, 1)
    return mesh.areas * np.einsum("mrq,q,m->m", r**2, q.weights, mesh.jacobian[1])


def estimate(field: FieldPair) -> IndicatorSet:
    """Indicators and oscillation of a solved field."""
    pr = field.problem
    if pr is None:
        raise ValueError("field carries no problem; oscillation needs the source")
    osc2 = oscillation(field.mesh, pr.source, field.dofmap.element.order, field.dofmap.n_components)
    return IndicatorSet(indicators(field), osc2, field.mesh)


def frozen_indicators(coarse_field: FieldPair, fine: Mesh, parent: np.ndarray | None = None) -> np.ndarray:
    """eta^2 of the coarse discrete stress evaluated on a refined mesh."""
    if parent is None:
        parent = locate(coarse_field.mesh, fine)
    dm = coarse_field.dofmap
    deg = dm.element.degree
    poly_c = stress_polynomials(coarse_field.mesh, dm, coarse_field.sigma)[parent]
    # re-expand each coarse polynomial in the child's reference coordinates
    exps = stress_basis(dm.element).exps
    n = len(exps)
    # sample on a unisolvent point set and solve for monomial coefficients
    pts = _unisolvent_points(deg)
    V = eval_monomials(exps, pts[:, 0], pts[:, 1])  # (n, n)
    ref = _coarse_ref_coords(coarse_field.mesh, fine, parent, pts)
    Pc = eval_monomials(exps, ref[..., 0], ref[..., 1])  # (n, Mf, npts)
    samples = np.einsum("mrcn,nmq->mrcq", poly_c, Pc)
    coeffs = np.linalg.solve(V.T, samples.reshape(-1, n).T).T.reshape(samples.shape[:-1] + (n,))
    return stress_indicators(fine, coeffs, dm.kind, deg)


def _unisolvent_points(degree: int) -> np.ndarray:
    """Lattice points of the reference triangle for P_degree."""
    m = max(degree, 1)
    pts = [(i / m, j / m) for j in range(m + 1) for i in range(m + 1 - j)]
    return np.array(pts[: (degree + 1) * (degree + 2) // 2] if degree > 0 else [(1 / 3, 1 / 3)])
