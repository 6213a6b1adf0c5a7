"""Global stress/displacement spaces on a mesh.

Stress coefficients are laid out as ``d`` scalar H(div) blocks for Stokes
(one per tensor row) and a single block for Poisson.  Within a block, edge
DOFs come first (edge by edge, in edge-table order, moment by moment),
followed by interior DOFs triangle by triangle.  Displacement coefficients
are per-element monomial coefficients in reference coordinates, again one
block per component.

Local stress shape functions on element K are

    phi_{K,l} = sign_{K,l} * scale_{K,l} * (J phi_hat_l) / det J,

where ``scale`` is |E|/|E_hat| for edge DOFs (so that the global DOF is the
mean normal moment over the physical edge) and 1 for interior DOFs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .elements import (
    REF_EDGE_LENGTHS,
    REF_VERTICES,
    ElementFamily,
    displacement_basis,
    edge_quadrature,
    eval_monomial_grads,
    eval_monomials,
    quadrature,
    stress_basis,
)
from .mesh import Mesh, locate

__all__ = [
    "DofMap",
    "FieldPair",
    "KINDS",
    "build_dofmap",
    "discrete_h1_matrix",
    "discrete_h1_norm",
    "divergence_coefficients",
    "divergence_matrix",
    "displacement_mass",
    "edge_ref_points",
    "evaluate_displacement",
    "evaluate_stress",
    "interpolate_stress",
    "project_source",
    "prolong_displacement",
    "prolong_stress",
    "stress_jacobian",
    "stress_polynomials",
]

KINDS = ("poisson", "stokes")


@dataclass(frozen=True, eq=False)
class DofMap:
    element: ElementFamily
    kind: str
    n_triangles: int
    n_edges: int
    cell_sigma: np.ndarray
    cell_sign: np.ndarray
    cell_u: np.ndarray
    n_scalar_sigma: int
    n_scalar_u: int

    @property
    def n_components(self) -> int:
        return 2 if self.kind == "stokes" else 1

    @property
    def n_sigma(self) -> int:
        return self.n_components * self.n_scalar_sigma

    @property
    def n_u(self) -> int:
        return self.n_components * self.n_scalar_u

    @property
    def constraint_index(self) -> int | None:
        """Row of the trace-mean multiplier in the saddle system (Stokes)."""
        return self.n_sigma + self.n_u if self.kind == "stokes" else None

    @property
    def n_total(self) -> int:
        return self.n_sigma + self.n_u + (1 if self.kind == "stokes" else 0)

    def cell_coefficients(self, sigma: np.ndarray) -> np.ndarray:
        """Signed local stress coefficients, shape (M, R, n_local)."""
        s = np.asarray(sigma, float).reshape(self.n_components, self.n_scalar_sigma)
        return np.transpose(s[:, self.cell_sigma] * self.cell_sign, (1, 0, 2))

    def cell_displacement(self, u: np.ndarray) -> np.ndarray:
        """Local displacement coefficients, shape (M, R, n_P)."""
        v = np.asarray(u, float).reshape(self.n_components, self.n_triangles, -1)
        return np.transpose(v, (1, 0, 2))


@dataclass(frozen=True, eq=False)
class FieldPair:
    """Discrete stress and displacement on a mesh."""

    sigma: np.ndarray
    u: np.ndarray
    mesh: Mesh
    dofmap: DofMap
    multiplier: float = 0.0
    problem: object = None

    def __post_init__(self):
        if len(self.sigma) != self.dofmap.n_sigma or len(self.u) != self.dofmap.n_u:
            raise ValueError("coefficient lengths do not match the dof map")


def build_dofmap(mesh: Mesh, element: ElementFamily, kind: str = "poisson") -> DofMap:
    if kind not in KINDS:
        raise ValueError(f"unknown problem kind {kind!r}")
    el = stress_basis(element)
    tbl = mesh.edges
    m, ne = mesh.n_triangles, el.edge_dofs
    cell = np.empty((m, el.n), np.int64)
    sign = np.ones((m, el.n), np.int64)
    for l, (i, j) in enumerate(zip(el.dof_edge, el.dof_moment)):
        if i >= 0:
            cell[:, l] = tbl.tri_edges[:, i] * ne + j
            # odd moments flip with the edge parameter, the normal flips always
            sign[:, l] = tbl.tri_signs[:, i] ** (j + 1)
    n_edge_total = tbl.n * ne
    interior = np.flatnonzero(el.dof_edge < 0)
    cell[:, interior] = n_edge_total + np.arange(m * len(interior)).reshape(m, len(interior))
    n_p = displacement_basis(element.order).n
    cell_u = np.arange(m * n_p, dtype=np.int64).reshape(m, n_p)
    for a in (cell, sign, cell_u):
        a.setflags(write=False)
    return DofMap(element, kind, m, tbl.n, cell, sign, cell_u,
                  n_edge_total + m * len(interior), m * n_p)


# -- local polynomial representation --------------------------------------------


def _edge_scale(mesh: Mesh, element: ElementFamily) -> np.ndarray:
    el = stress_basis(element)
    scale = np.ones((mesh.n_triangles, el.n))
    for l, i in enumerate(el.dof_edge):
        if i >= 0:
            scale[:, l] = mesh.local_edge_lengths[:, i] / REF_EDGE_LENGTHS[i]
    return scale


def local_stress_basis(mesh: Mesh, element: ElementFamily) -> np.ndarray:
    """Unsigned physical shape functions as polynomials in reference
    coordinates: shape (M, n_local, 2, n_monomials)."""
    key = ("local_basis", element)
    if key not in mesh._cache:
        el = stress_basis(element)
        J, det, _ = mesh.jacobian
        scale = _edge_scale(mesh, element) / det[:, None]
        out = np.einsum("mij,ljn->mlin", J, el.basis) * scale[:, :, None, None]
        out.setflags(write=False)
        mesh._cache[key] = out
    return mesh._cache[key]


def stress_polynomials(mesh: Mesh, dofmap: DofMap, sigma: np.ndarray) -> np.ndarray:
    """Per-element stress as polynomials in reference coordinates,
    shape (M, R, 2, n_monomials)."""
    basis = local_stress_basis(mesh, dofmap.element)
    return np.einsum("mrl,mlin->mrin", dofmap.cell_coefficients(sigma), basis)


def evaluate_stress(mesh: Mesh, dofmap: DofMap, sigma: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Stress values at reference points on every element: (M, R, 2, n_pts)."""
    exps = stress_basis(dofmap.element).exps
    P = eval_monomials(exps, points[:, 0], points[:, 1])
    return stress_polynomials(mesh, dofmap, sigma) @ P


def polynomial_jacobian(mesh: Mesh, poly: np.ndarray, exps, points: np.ndarray) -> np.ndarray:
    """Physical derivatives d(field)_rc/dx_k: shape (M, R, 2, 2, n_pts)."""
    G = eval_monomial_grads(exps, points[:, 0], points[:, 1])
    dhat = np.einsum("mrcn,jnq->mrcjq", poly, G)
    return np.einsum("mrcjq,mjk->mrckq", dhat, mesh.jacobian[2])


def stress_jacobian(mesh: Mesh, dofmap: DofMap, sigma: np.ndarray, points: np.ndarray) -> np.ndarray:
    exps = stress_basis(dofmap.element).exps
    return polynomial_jacobian(mesh, stress_polynomials(mesh, dofmap, sigma), exps, points)


def evaluate_displacement(mesh: Mesh, dofmap: DofMap, u: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Displacement values at reference points: (M, R, n_pts)."""
    P = displacement_basis(dofmap.element.order).values(points)
    return dofmap.cell_displacement(u) @ P


def edge_ref_points(mesh: Mesh, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reference coordinates of edge parameters ``s`` (lo -> hi) seen from
    each side of every edge.

    Returns ``(tris, points)`` with ``tris`` (E, 2) and ``points``
    (E, 2, n_s, 2).  On boundary edges the second side repeats K+.
    """
    tbl = mesh.edges
    tris = tbl.tris.copy()
    loc = tbl.local.copy()
    b = tbl.boundary
    tris[b, 1] = tris[b, 0]
    loc[b, 1] = loc[b, 0]
    forward = tbl.tri_signs[tris, loc] > 0
    s = np.asarray(s, float)
    s_loc = np.where(forward[..., None], s, 1.0 - s)
    p0 = REF_VERTICES[(loc + 1) % 3]
    p1 = REF_VERTICES[(loc + 2) % 3]
    pts = p0[:, :, None, :] + s_loc[..., None] * (p1 - p0)[:, :, None, :]
    return tris, pts


def edge_values(poly: np.ndarray, exps, tris: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Evaluate per-element polynomials (M, ..., n_mono) at per-edge points.

    Returns shape (E, 2, ..., n_s).
    """
    P = eval_monomials(exps, points[..., 0], points[..., 1])  # (n_mono, E, 2, n_s)
    return np.einsum("eknq,ek...n->ek...q", np.moveaxis(P, 0, 2), poly[tris])


# -- projection and matrices ----------------------------------------------------


def _source_values(f: Callable, phys: np.ndarray, n_components: int) -> np.ndarray:
    """Evaluate f on physical points (M, n_q, 2) -> (M, R, n_q)."""
    vals = np.asarray(f(phys[..., 0], phys[..., 1]), float)
    if n_components == 1:
        vals = np.broadcast_to(vals, phys.shape[:2])[:, None, :]
    else:
        vals = np.moveaxis(np.broadcast_to(vals, (n_components,) + phys.shape[:2]), 0, 1)
    return vals


def project_source(mesh: Mesh, f: Callable, order: int, n_components: int = 1,
                   degree: int | None = None) -> np.ndarray:
    """Elementwise L2 projection of f onto P_k: coefficients (R, M, n_P).

    ``f(x, y)`` returns an array shaped like x (scalar) or (R, *x.shape).
    """
    q = quadrature(2 * order + 4 if degree is None else degree)
    ue = displacement_basis(order)
    P = ue.values(q.points)
    vals = _source_values(f, mesh.to_physical(q.points), n_components)
    rhs = np.einsum("mrq,lq,q->rml", vals, P, q.weights)
    return np.linalg.solve(ue.mass, rhs.reshape(-1, ue.n).T).T.reshape(rhs.shape)


def load_vector(mesh: Mesh, dofmap: DofMap, f: Callable | None = None,
                values: np.ndarray | None = None, degree: int | None = None) -> np.ndarray:
    """Right-hand side (f, v_j) over the displacement basis.

    Either a point-evaluable ``f`` or precomputed ``values`` (M, R, n_q) at
    the quadrature points of ``degree`` must be given.
    """
    k = dofmap.element.order
    q = quadrature(2 * k + 4 if degree is None else degree)
    P = displacement_basis(k).values(q.points)
    if values is None:
        values = _source_values(f, mesh.to_physical(q.points), dofmap.n_components)
    det = mesh.jacobian[1]
    return np.einsum("mrq,lq,q,m->rml", values, P, q.weights, det).ravel()


def _block_diag(mat: sp.spmatrix, n: int) -> sp.csr_matrix:
    return sp.block_diag([mat] * n, format="csr") if n > 1 else sp.csr_matrix(mat)


def divergence_matrix(mesh: Mesh, dofmap: DofMap) -> sp.csr_matrix:
    """Sparse B with (B sigma)_j = (div sigma_h, v_j)."""
    el = stress_basis(dofmap.element)
    ue = displacement_basis(dofmap.element.order)
    q = quadrature(2 * dofmap.element.order + 1)
    # det J cancels between the Piola divergence and the volume element
    local = np.einsum("lq,pq,q->pl", el.divergence(q.points), ue.values(q.points), q.weights)
    scale = _edge_scale(mesh, dofmap.element) * dofmap.cell_sign
    vals = local[None] * scale[:, None, :]
    rows = np.broadcast_to(dofmap.cell_u[:, :, None], vals.shape)
    cols = np.broadcast_to(dofmap.cell_sigma[:, None, :], vals.shape)
    B = sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())),
                      shape=(dofmap.n_scalar_u, dofmap.n_scalar_sigma)).tocsr()
    return _block_diag(B, dofmap.n_components)


def displacement_mass(mesh: Mesh, dofmap: DofMap) -> sp.csr_matrix:
    ue = displacement_basis(dofmap.element.order)
    det = mesh.jacobian[1]
    blocks = det[:, None, None] * ue.mass[None]
    return _block_diag(sp.block_diag(list(blocks), format="csr"), dofmap.n_components)


def divergence_coefficients(mesh: Mesh, dofmap: DofMap, sigma: np.ndarray) -> np.ndarray:
    """Displacement-space coefficients of div sigma_h (exact: div maps the stress space into the displacement space)."""
    el = stress_basis(dofmap.element)
    ue = displacement_basis(dofmap.element.order)
    q = quadrature(2 * dofmap.element.order + 1)
    local = np.einsum("lq,pq,q->pl", el.divergence(q.points), ue.values(q.points), q.weights)
    local = np.linalg.solve(ue.mass, local)
    det = mesh.jacobian[1]
    coef = dofmap.cell_coefficients(sigma) * _edge_scale(mesh, dofmap.element)[:, None, :]
    out = np.einsum("pl,mrl->rmp", local, coef) / det[None, :, None]
    return out.ravel()


def _h1_parts(mesh: Mesh, dofmap: DofMap, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-element squared broken gradients and per-edge scaled squared jumps."""
    k = dofmap.element.order
    ue = displacement_basis(k)
    coef = dofmap.cell_displacement(u)  # (M, R, nP)
    grad_el = np.zeros(mesh.n_triangles)
    if k > 0:
        q = quadrature(2 * k)
        G = ue.gradients(q.points)  # (2, nP, nq)
        ghat = np.einsum("mrp,jpq->mrjq", coef, G)
        g = np.einsum("mrjq,mjk->mrkq", ghat, mesh.jacobian[2])
        grad_el = np.einsum("mrkq,q->m", g**2, q.weights) * mesh.jacobian[1]
    s, w = edge_quadrature(2 * k)
    tris, pts = edge_ref_points(mesh, s)
    vals = edge_values(coef, ue.exps, tris, pts)  # (E, 2, R, ns)
    jump = vals[:, 0] - np.where(mesh.edges.boundary[:, None, None], 0.0, vals[:, 1])
    # h_E^-1 ||jump||^2 with ds = |E| ds_hat
    jump_e = np.einsum("erq,q->e", jump**2, w)
    return grad_el, jump_e


def discrete_h1_norm(mesh: Mesh, dofmap: DofMap, u: np.ndarray, subset=None) -> float:
    """Mesh-dependent norm: broken gradients plus h_E^-1-weighted jumps.

    Boundary edges contribute the one-sided trace.  With ``subset`` only
    elements of the subset and edges of those elements are summed.
    """
    grad_el, jump_e = _h1_parts(mesh, dofmap, u)
    if subset is None:
        return float(np.sqrt(grad_el.sum() + jump_e.sum()))
    idx = np.asarray(list(subset) if not isinstance(subset, np.ndarray) else subset, np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= mesh.n_triangles):
        raise IndexError("subset index out of range")
    edges = np.unique(mesh.edges.tri_edges[idx].ravel()) if idx.size else np.empty(0, np.int64)
    return float(np.sqrt(grad_el[np.unique(idx)].sum() + jump_e[edges].sum()))


def discrete_h1_matrix(mesh: Mesh, dofmap: DofMap) -> sp.csr_matrix:
    """Gram matrix of the discrete H1 norm on the displacement space."""
    k = dofmap.element.order
    ue = displacement_basis(k)
    n_p = ue.n
    rows, cols, vals = [], [], []
    if k > 0:
        q = quadrature(2 * k)
        G = ue.gradients(q.points)
        g = np.einsum("jpq,mjk->mpkq", G, mesh.jacobian[2])
        loc = np.einsum("mpkq,mskq,q,m->mps", g, g, q.weights, mesh.jacobian[1])
        idx = dofmap.cell_u
        rows.append(np.broadcast_to(idx[:, :, None], loc.shape).ravel())
        cols.append(np.broadcast_to(idx[:, None, :], loc.shape).ravel())
        vals.append(loc.ravel())
    s, w = edge_quadrature(2 * k)
    tris, pts = edge_ref_points(mesh, s)
    P = eval_monomials(ue.exps, pts[..., 0], pts[..., 1])  # (nP, E, 2, ns)
    P = np.moveaxis(P, 0, 2)  # (E, 2, nP, ns)
    P[:, 1] *= -1.0
    P[mesh.edges.boundary, 1] = 0.0
    jb = P.reshape(len(P), 2 * n_p, -1)
    loc = np.einsum("eaq,ebq,q->eab", jb, jb, w)
    idx = np.concatenate([dofmap.cell_u[tris[:, 0]], dofmap.cell_u[tris[:, 1]]], axis=1)
    rows.append(np.broadcast_to(idx[:, :, None], loc.shape).ravel())
    cols.append(np.broadcast_to(idx[:, None, :], loc.shape).ravel())
    vals.append(loc.ravel())
    n = dofmap.n_scalar_u
    D = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsr()
    return _block_diag(D, dofmap.n_components)


# -- interpolation and transfer between nested meshes ---------------------------


def _interpolate_from_values(mesh: Mesh, dofmap: DofMap, values: np.ndarray) -> np.ndarray:
    """Canonical interpolant from physical stress values at the element DOF
    points, ``values`` shaped (M, R, 2, n_pts)."""
    el = stress_basis(dofmap.element)
    J, det, Jinv = mesh.jacobian
    pulled = np.einsum("mij,mrjq->mrqi", Jinv, values) * det[:, None, None, None]
    local = el.apply_dofs(pulled) / _edge_scale(mesh, dofmap.element)[:, None, :]  # (M, R, n)
    local = local * dofmap.cell_sign[:, None, :]
    out = np.zeros((dofmap.n_components, dofmap.n_scalar_sigma))
    for r in range(dofmap.n_components):
        out[r, dofmap.cell_sigma.ravel()] = local[:, r, :].ravel()
    return out.ravel()


def interpolate_stress(mesh: Mesh, dofmap: DofMap, fn: Callable) -> np.ndarray:
    """Canonical (DOF) interpolant of a stress field.

    ``fn(x, y)`` returns shape (2, *x.shape) for Poisson and (2, 2, *x.shape)
    for Stokes (row index first).
    """
    el = stress_basis(dofmap.element)
    phys = mesh.to_physical(el.dof_points)
    vals = np.asarray(fn(phys[..., 0], phys[..., 1]), float)
    if dofmap.n_components == 1:
        vals = vals[None]
    vals = np.moveaxis(vals, -2, 0)  # (M, R, 2, n_pts)
    return _interpolate_from_values(mesh, dofmap, vals)


def _coarse_ref_coords(coarse: Mesh, fine: Mesh, parent: np.ndarray, points: np.ndarray) -> np.ndarray:
    phys = fine.to_physical(points)  # (Mf, nq, 2)
    v0 = coarse.vertices[coarse.triangles[parent, 0]]
    Jinv = coarse.jacobian[2][parent]
    return np.einsum("mij,mqj->mqi", Jinv, phys - v0[:, None, :])


def _eval_at(poly: np.ndarray, exps, ref: np.ndarray) -> np.ndarray:
    """Evaluate (M, ..., n_mono) polynomials at per-element points (M, nq, 2)."""
    P = eval_monomials(exps, ref[..., 0], ref[..., 1])  # (n_mono, M, nq)
    return np.einsum("m...n,nmq->m...q", poly, P)


def prolong_stress(coarse: Mesh, coarse_dofmap: DofMap, sigma: np.ndarray,
                   fine: Mesh, fine_dofmap: DofMap, parent: np.ndarray | None = None) -> np.ndarray:
    """Represent a coarse stress exactly in the nested fine space."""
    if parent is None:
        parent = locate(coarse, fine)
    el = stress_basis(fine_dofmap.element)
    poly = stress_polynomials(coarse, coarse_dofmap, sigma)[parent]
    ref = _coarse_ref_coords(coarse, fine, parent, el.dof_points)
    vals = _eval_at(poly, stress_basis(coarse_dofmap.element).exps, ref)
    return _interpolate_from_values(fine, fine_dofmap, vals)


def prolong_displacement(coarse: Mesh, coarse_dofmap: DofMap, u: np.ndarray,
                         fine: Mesh, fine_dofmap: DofMap, parent: np.ndarray | None = None) -> np.ndarray:
    """Represent a coarse piecewise polynomial exactly on the fine mesh."""
    if parent is None:
        parent = locate(coarse, fine)
    k = fine_dofmap.element.order
    ue = displacement_basis(k)
    q = quadrature(2 * k)
    poly = coarse_dofmap.cell_displacement(u)[parent]
    ref = _coarse_ref_coords(coarse, fine, parent, q.points)
    vals = _eval_at(poly, displacement_basis(coarse_dofmap.element.order).exps, ref)
    rhs = np.einsum("mrq,lq,q->rml", vals, ue.values(q.points), q.weights)
    return np.linalg.solve(ue.mass, rhs.reshape(-1, ue.n).T).T.ravel()
