"""Assembly and direct solution of the mixed saddle-point problem.

Unknowns are ordered (sigma, u[, multiplier]) and the symmetric system is

    [ M   -B^T  g^T ] [sigma]   [ 0 ]
    [ -B   0    0   ] [  u  ] = [-F ]
    [ g    0    0   ] [ lam ]   [ 0 ]

with ``M_ij = (A phi_j, phi_i)``, ``(B sigma)_j = (div sigma, v_j)`` and
``F_j = (f, v_j)``.  The last row (Stokes only) enforces a zero mean trace.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .elements import eval_monomials, quadrature
from .mesh import Mesh
from .problems import Problem
from .spaces import (
    DofMap,
    FieldPair,
    build_dofmap,
    divergence_matrix,
    evaluate_stress,
    load_vector,
    local_stress_basis,
    stress_basis,
)

__all__ = [
    "MaterialOperator",
    "SaddleSystem",
    "SingularSystemError",
    "SolverError",
    "assemble",
    "energy_error",
    "energy_norm",
    "solve",
    "solve_problem",
    "stress_mass",
    "trace_integral",
]

RESIDUAL_TOL = 1e-10
DENSE_NULL_LIMIT = 3000


class SolverError(RuntimeError):
    """The linear solve did not reach the residual tolerance."""


class SingularSystemError(SolverError):
    def __init__(self, message: str, null_vector: np.ndarray | None = None):
        super().__init__(message)
        self.null_vector = null_vector


class MaterialOperator(enum.Enum):
    IDENTITY = "identity"
    DEVIATORIC = "deviatoric"

    @classmethod
    def for_kind(cls, kind: str) -> "MaterialOperator":
        return cls.DEVIATORIC if kind == "stokes" else cls.IDENTITY

    def apply(self, tau: np.ndarray, row_axis: int = -3) -> np.ndarray:
        """Apply to tensors whose row/column axes are ``row_axis`` and
        ``row_axis + 1`` (Stokes); vectors pass through unchanged."""
        if self is MaterialOperator.IDENTITY:
            return tau
        t = np.moveaxis(tau, (row_axis, row_axis + 1), (0, 1))
        tr = t[0, 0] + t[1, 1]
        out = t.copy()
        out[0, 0] -= 0.5 * tr
        out[1, 1] -= 0.5 * tr
        return np.moveaxis(out, (0, 1), (row_axis, row_axis + 1))


@dataclass(frozen=True, eq=False)
class SaddleSystem:
    mesh: Mesh
    dofmap: DofMap
    problem: Problem
    M: sp.csr_matrix
    B: sp.csr_matrix
    g: np.ndarray | None
    rhs: np.ndarray

    @property
    def matrix(self) -> sp.csc_matrix:
        blocks = [[self.M, -self.B.T], [-self.B, None]]
        if self.g is not None:
            gr = sp.csr_matrix(self.g[None, :])
            blocks = [[self.M, -self.B.T, gr.T], [-self.B, None, None], [gr, None, None]]
        return sp.bmat(blocks, format="csc")

    def full_rhs(self, rhs: np.ndarray | None = None) -> np.ndarray:
        F = self.rhs if rhs is None else rhs
        out = np.zeros(self.dofmap.n_total)
        out[self.dofmap.n_sigma:self.dofmap.n_sigma + self.dofmap.n_u] = -F
        return out


def _stress_values(mesh: Mesh, dofmap: DofMap, degree: int):
    q = quadrature(degree)
    P = eval_monomials(stress_basis(dofmap.element).exps, q.points[:, 0], q.points[:, 1])
    V = local_stress_basis(mesh, dofmap.element) @ P  # (M, nloc, 2, nq)
    V = V * dofmap.cell_sign[:, :, None, None]
    return q, V


def stress_mass(mesh: Mesh, dofmap: DofMap, operator: MaterialOperator | None = None) -> sp.csr_matrix:
    """Sparse matrix of (A phi_j, phi_i) over the stress space.

    ``operator`` defaults to the problem's material operator; pass
    ``MaterialOperator.IDENTITY`` for the plain L2 Gram matrix.
    """
    if operator is None:
        operator = MaterialOperator.for_kind(dofmap.kind)
    q, V = _stress_values(mesh, dofmap, 2 * dofmap.element.degree)
    det = mesh.jacobian[1]
    K = np.einsum("mlcq,mndq,q,m->mlncd", V, V, q.weights, det)
    n = dofmap.n_scalar_sigma
    idx = dofmap.cell_sigma
    rows = np.broadcast_to(idx[:, :, None], K.shape[:3]).ravel()
    cols = np.broadcast_to(idx[:, None, :], K.shape[:3]).ravel()

    def scatter(local):
        return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()

    full = scatter(K[..., 0, 0] + K[..., 1, 1])
    if dofmap.kind == "poisson":
        return full
    if operator is MaterialOperator.IDENTITY:
        return sp.block_diag([full, full], format="csr")
    b = [[full - 0.5 * scatter(K[..., r, s]) if r == s else -0.5 * scatter(K[..., r, s])
          for s in range(2)] for r in range(2)]
    return sp.bmat(b, format="csr")


def trace_row(mesh: Mesh, dofmap: DofMap) -> np.ndarray:
    """Coefficients g with g @ sigma = integral of tr(sigma_h)."""
    q, V = _stress_values(mesh, dofmap, dofmap.element.degree)
    det = mesh.jacobian[1]
    g = np.zeros((2, dofmap.n_scalar_sigma))
    for r in range(2):
        loc = np.einsum("mlq,q,m->ml", V[:, :, r], q.weights, det)
        np.add.at(g[r], dofmap.cell_sigma.ravel(), loc.ravel())
    return g.ravel()


def trace_integral(field: FieldPair) -> float:
    return float(trace_row(field.mesh, field.dofmap) @ field.sigma)


def assemble(mesh: Mesh, problem: Problem, dofmap: DofMap | None = None) -> SaddleSystem:
    if dofmap is None:
        dofmap = build_dofmap(mesh, problem.element, problem.kind)
    elif dofmap.element != problem.element or dofmap.kind != problem.kind:
        raise ValueError("dof map does not match the problem")
    M = stress_mass(mesh, dofmap)
    B = divergence_matrix(mesh, dofmap)
    g = trace_row(mesh, dofmap) if problem.kind == "stokes" else None
    rhs = load_vector(mesh, dofmap, problem.source)
    return SaddleSystem(mesh, dofmap, problem, M, B, g, rhs)


def _near_null_vector(K: sp.spmatrix) -> np.ndarray | None:
    if K.shape[0] > DENSE_NULL_LIMIT:
        return None
    _, _, vt = np.linalg.svd(K.toarray())
    return vt[-1]


def solve(system: SaddleSystem, rhs: np.ndarray | None = None) -> FieldPair:
    """Solve by sparse LU with a residual check and iterative refinement.

    ``rhs`` optionally replaces the load vector (length ``n_u``).
    """
    K = system.matrix
    b = system.full_rhs(rhs)
    try:
        lu = spla.splu(K)
    except RuntimeError as exc:
        raise SingularSystemError(f"singular saddle system: {exc}", _near_null_vector(K)) from exc
    x = lu.solve(b)
    scale = max(np.linalg.norm(b), 1.0)
    res = np.linalg.norm(b - K @ x) / scale
    for _ in range(3):
        if res <= RESIDUAL_TOL * 1e-2:
            break
        x += lu.solve(b - K @ x)
        res = np.linalg.norm(b - K @ x) / scale
    if not np.all(np.isfinite(x)):
        raise SingularSystemError("non-finite solution; system is numerically singular",
                                  _near_null_vector(K))
    if res > RESIDUAL_TOL:
        raise SolverError(f"relative residual {res:.3e} exceeds {RESIDUAL_TOL:g}")
    dm = system.dofmap
    lam = float(x[dm.n_sigma + dm.n_u]) if dm.kind == "stokes" else 0.0
    return FieldPair(x[:dm.n_sigma].copy(), x[dm.n_sigma:dm.n_sigma + dm.n_u].copy(),
                     system.mesh, dm, lam, system.problem)


def solve_problem(mesh: Mesh, problem: Problem) -> FieldPair:
    return solve(assemble(mesh, problem))


def energy_norm(mesh: Mesh, dofmap: DofMap, sigma: np.ndarray, degree: int | None = None) -> float:
    """(A sigma_h, sigma_h)^(1/2) evaluated pointwise by quadrature.

    A is an orthogonal projection, so (A tau, tau) = |A tau|^2 pointwise;
    squaring the projected values keeps the result at rounding level for
    fields in the kernel of A.
    """
    q = quadrature(2 * dofmap.element.degree if degree is None else degree)
    vals = evaluate_stress(mesh, dofmap, sigma, q.points)  # (M, R, 2, nq)
    op = MaterialOperator.for_kind(dofmap.kind)
    a = op.apply(vals, row_axis=1) if dofmap.kind == "stokes" else vals
    return float(np.sqrt(np.einsum("mrcq,q,m->", a * a, q.weights, mesh.jacobian[1])))


def energy_error(field: FieldPair, exact_sigma=None, degree: int = 6) -> float:
    """||sigma - sigma_h||_A against a point-evaluable exact stress."""
    fn = exact_sigma if exact_sigma is not None else getattr(field.problem, "exact_sigma", None)
    if fn is None:
        raise ValueError("no exact stress available")
    mesh, dm = field.mesh, field.dofmap
    q = quadrature(degree)
    phys = mesh.to_physical(q.points)
    ex = np.asarray(fn(phys[..., 0], phys[..., 1]), float)
    ex = ex[None] if dm.kind == "poisson" else ex
    ex = np.moveaxis(ex, (0, 1), (1, 2))  # (M, R, 2, nq)
    diff = ex - evaluate_stress(mesh, dm, field.sigma, q.points)
    if dm.kind == "stokes":
        diff_a = MaterialOperator.DEVIATORIC.apply(diff, row_axis=1)
    else:
        diff_a = diff
    return float(np.sqrt(np.einsum("mrcq,q,m->", diff_a * diff_a, q.weights, mesh.jacobian[1])))
