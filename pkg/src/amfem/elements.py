"""Reference-triangle quadrature and RT/BDM/P_k shape functions.

The reference triangle has vertices (0,0), (1,0), (0,1).  Local edge ``i``
is opposite vertex ``i`` and is parametrised by ``s`` in [0, 1] from vertex
``i+1`` to vertex ``i+2``.  Stress shape functions are stored as coefficient
arrays of shape (n_basis, 2, n_monomials) over the monomials returned by
:func:`monomials`, and are the dual basis of the element's degrees of
freedom:

* edge moments ``|E|^-1 int_E (phi . n) q_j ds`` with ``q_j`` the shifted
  Legendre polynomials on the edge parameter, and
* interior moments ``int_K phi . p dx``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

__all__ = [
    "DisplacementElement",
    "ElementFamily",
    "Family",
    "QuadratureRule",
    "REF_EDGE_LENGTHS",
    "REF_NORMALS",
    "REF_VERTICES",
    "StressElement",
    "displacement_basis",
    "edge_quadrature",
    "eval_monomials",
    "eval_monomial_grads",
    "legendre01",
    "monomials",
    "piola_map",
    "quadrature",
    "stress_basis",
]

REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
REF_EDGE_LENGTHS = np.array([np.sqrt(2.0), 1.0, 1.0])
REF_NORMALS = np.array([[1.0, 1.0], [-np.sqrt(2.0), 0.0], [0.0, -np.sqrt(2.0)]]) / np.sqrt(2.0)

MAX_QUADRATURE_DEGREE = 6


class Family(str, enum.Enum):
    RT = "rt"
    BDM = "bdm"


@dataclass(frozen=True)
class ElementFamily:
    """Stress element: Raviart-Thomas or Brezzi-Douglas-Marini, order k.

    Order ``k`` is the polynomial degree of the displacement space; RT_k
    stresses live in P_k^2 + x P_k and BDM_k stresses in P_{k+1}^2.
    """

    family: Family
    order: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.order not in (0, 1):
            raise ValueError(f"unsupported element order {self.order!r}; expected 0 or 1")

    @property
    def degree(self) -> int:
        """Polynomial degree of the stress shape functions."""
        return self.order + 1

    def __str__(self) -> str:
        return f"{self.family.value.upper()}{self.order}"


# -- polynomials ----------------------------------------------------------------


@lru_cache(maxsize=None)
def monomials(degree: int) -> tuple[tuple[int, int], ...]:
    """Exponents (a, b) of x^a y^b, ordered by total degree."""
    return tuple((a, d - a) for d in range(degree + 1) for a in range(d, -1, -1))


def eval_monomials(exps, x, y) -> np.ndarray:
    """Values of each monomial: shape (n_monomials, *x.shape)."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    return np.stack([x**a * y**b for a, b in exps])


def eval_monomial_grads(exps, x, y) -> np.ndarray:
    """Gradients of each monomial: shape (2, n_monomials, *x.shape)."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    zero = np.zeros_like(x)
    dx = np.stack([a * x ** max(a - 1, 0) * y**b if a else zero for a, b in exps])
    dy = np.stack([b * x**a * y ** max(b - 1, 0) if b else zero for a, b in exps])
    return np.stack([dx, dy])


def legendre01(j: int, s) -> np.ndarray:
    """Shifted Legendre polynomial of degree j on [0, 1]."""
    s = np.asarray(s, float)
    if j == 0:
        return np.ones_like(s)
    if j == 1:
        return 2 * s - 1
    if j == 2:
        return 6 * s**2 - 6 * s + 1
    raise ValueError(f"edge moment degree {j} not supported")


# -- quadrature -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Rule on the reference triangle; weights sum to 1/2."""

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def barycentric(self) -> np.ndarray:
        x, y = self.points.T
        return np.stack([1 - x - y, x, y], axis=1)

    def __len__(self) -> int:
        return len(self.weights)


@lru_cache(maxsize=None)
def quadrature(degree: int) -> QuadratureRule:
    """Collapsed Gauss rule exact for polynomials of total degree ``degree``."""
    if degree < 0 or degree > MAX_QUADRATURE_DEGREE:
        raise ValueError(f"quadrature degree must be in [0, {MAX_QUADRATURE_DEGREE}], got {degree}")
    n = max(1, (degree + 2) // 2)
    xs, ws = np.polynomial.legendre.leggauss(n)
    s, ws = (xs + 1) / 2, ws / 2
    xt, wt = roots_jacobi(n, 1.0, 0.0)
    t, wt = (xt + 1) / 2, wt / 4
    S, T = np.meshgrid(s, t, indexing="ij")
    pts = np.stack([(S * (1 - T)).ravel(), T.ravel()], axis=1)
    w = np.outer(ws, wt).ravel()
    for a in (pts, w):
        a.setflags(write=False)
    return QuadratureRule(pts, w, degree)


@lru_cache(maxsize=None)
def edge_quadrature(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre points and weights on [0, 1] exact to ``degree``."""
    n = max(1, (degree + 2) // 2)
    xs, ws = np.polynomial.legendre.leggauss(n)
    s, w = (xs + 1) / 2, ws / 2
    s.setflags(write=False)
    w.setflags(write=False)
    return s, w


def ref_edge_points(i: int, s) -> np.ndarray:
    """Points on reference edge i at parameters s: shape (len(s), 2)."""
    p, q = REF_VERTICES[(i + 1) % 3], REF_VERTICES[(i + 2) % 3]
    s = np.asarray(s, float)
    return p + s[..., None] * (q - p)


# -- stress elements ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StressElement:
    element: ElementFamily
    exps: tuple
    basis: np.ndarray          # (n, 2, n_monomials)
    dof_edge: np.ndarray       # (n,) local edge of each dof, -1 for interior
    dof_moment: np.ndarray     # (n,) edge moment degree, -1 for interior
    dof_points: np.ndarray     # (n_pts, 2)
    dof_weights: np.ndarray    # (n, n_pts, 2)

    @property
    def n(self) -> int:
        return len(self.basis)

    @property
    def edge_dofs(self) -> int:
        return int(np.sum(self.dof_edge == 0))

    @property
    def interior_dofs(self) -> int:
        return int(np.sum(self.dof_edge < 0))

    def apply_dofs(self, values: np.ndarray) -> np.ndarray:
        """Degrees of freedom of fields sampled at ``dof_points``.

        ``values`` has shape (..., n_pts, 2); the result (..., n).
        """
        return np.einsum("...qc,lqc->...l", values, self.dof_weights)

    def values(self, points: np.ndarray) -> np.ndarray:
        """Shape functions at reference points: (n, 2, n_pts)."""
        P = eval_monomials(self.exps, points[:, 0], points[:, 1])
        return self.basis @ P

    def divergence(self, points: np.ndarray) -> np.ndarray:
        """Reference divergence of the shape functions: (n, n_pts)."""
        G = eval_monomial_grads(self.exps, points[:, 0], points[:, 1])
        return self.basis[:, 0] @ G[0] + self.basis[:, 1] @ G[1]


def _spanning_set(element: ElementFamily, exps) -> list[np.ndarray]:
    index = {e: i for i, e in enumerate(exps)}
    k = element.order

    def vec(cx: dict, cy: dict) -> np.ndarray:
        out = np.zeros((2, len(exps)))
        for e, v in cx.items():
            out[0, index[e]] += v
        for e, v in cy.items():
            out[1, index[e]] += v
        return out

    if element.family is Family.RT:
        full = [e for e in exps if sum(e) <= k]
        span = [vec({e: 1}, {}) for e in full] + [vec({}, {e: 1}) for e in full]
        for a, b in (e for e in exps if sum(e) == k):
            span.append(vec({(a + 1, b): 1}, {(a, b + 1): 1}))
    else:
        span = [vec({e: 1}, {}) for e in exps] + [vec({}, {e: 1}) for e in exps]
    return span


def _interior_tests(element: ElementFamily) -> list[np.ndarray]:
    """Interior moment test fields as callables on (x, y) -> (2, ...)."""
    if element.family is Family.RT:
        if element.order == 0:
            return []
        return [lambda x, y: np.stack([np.ones_like(x), np.zeros_like(x)]),
                lambda x, y: np.stack([np.zeros_like(x), np.ones_like(x)])]
    if element.order == 0:
        return []
    # lowest-order Nedelec (first kind): constants plus the rotation field
    return [lambda x, y: np.stack([np.ones_like(x), np.zeros_like(x)]),
            lambda x, y: np.stack([np.zeros_like(x), np.ones_like(x)]),
            lambda x, y: np.stack([-y, x])]


@lru_cache(maxsize=None)
def stress_basis(element: ElementFamily) -> StressElement:
    """Dual shape functions of an RT_k or BDM_k element on the reference triangle."""
    if not isinstance(element, ElementFamily):
        raise TypeError("expected an ElementFamily")
    deg = element.degree
    exps = monomials(deg)
    n_edge = element.order + 1 if element.family is Family.RT else element.order + 2

    s, ws = edge_quadrature(2 * deg + 2)
    q = quadrature(2 * deg)
    pts = [ref_edge_points(i, s) for i in range(3)] + [q.points]
    offsets = np.cumsum([0] + [len(p) for p in pts])
    points = np.concatenate(pts)

    rows, dof_edge, dof_moment = [], [], []
    for i in range(3):
        for j in range(n_edge):
            w = np.zeros((len(points), 2))
            w[offsets[i]:offsets[i + 1]] = (ws * legendre01(j, s))[:, None] * REF_NORMALS[i]
            rows.append(w)
            dof_edge.append(i)
            dof_moment.append(j)
    x, y = q.points.T
    for test in _interior_tests(element):
        w = np.zeros((len(points), 2))
        w[offsets[3]:] = (q.weights * test(x, y)).T
        rows.append(w)
        dof_edge.append(-1)
        dof_moment.append(-1)
    W = np.array(rows)

    span = np.array(_spanning_set(element, exps))
    P = eval_monomials(exps, points[:, 0], points[:, 1])
    span_vals = np.einsum("bcn,nq->bqc", span, P)
    V = np.einsum("lqc,bqc->lb", W, span_vals)
    if V.shape[0] != V.shape[1]:
        raise RuntimeError(f"{element}: {V.shape[0]} dofs for a {V.shape[1]}-dimensional space")
    basis = np.linalg.solve(V.T, span.reshape(len(span), -1)).reshape(span.shape)
    for a in (basis, W, points):
        a.setflags(write=False)
    return StressElement(element, exps, basis, np.array(dof_edge), np.array(dof_moment), points, W)


# -- displacement elements ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DisplacementElement:
    order: int
    exps: tuple
    mass: np.ndarray  # reference Gram matrix

    @property
    def n(self) -> int:
        return len(self.exps)

    def values(self, points: np.ndarray) -> np.ndarray:
        return eval_monomials(self.exps, points[:, 0], points[:, 1])

    def gradients(self, points: np.ndarray) -> np.ndarray:
        return eval_monomial_grads(self.exps, points[:, 0], points[:, 1])


@lru_cache(maxsize=None)
def displacement_basis(order: int) -> DisplacementElement:
    """Monomial basis of P_k on the reference triangle."""
    if order not in (0, 1):
        raise ValueError(f"unsupported displacement order {order!r}; expected 0 or 1")
    exps = monomials(order)
    q = quadrature(2 * order)
    P = eval_monomials(exps, q.points[:, 0], q.points[:, 1])
    mass = (P * q.weights) @ P.T
    mass.setflags(write=False)
    return DisplacementElement(order, exps, mass)


# -- Piola ----------------------------------------------------------------------


def piola_map(jacobian: np.ndarray, ref_values: np.ndarray) -> np.ndarray:
    """Contravariant Piola transform ``J v / det J``.

    ``jacobian`` is (2, 2) or (M, 2, 2); ``ref_values`` has the vector
    component on axis 0 (single element) or axis 1 (batched).
    """
    J = np.asarray(jacobian, float)
    v = np.asarray(ref_values, float)
    det = np.linalg.det(J)
    scale = np.max(np.abs(J), axis=(-2, -1)) ** 2
    if np.any(np.abs(det) <= 1e-14 * scale):
        raise ValueError("degenerate element: Jacobian determinant vanishes")
    if J.ndim == 2:
        return np.tensordot(J, v, axes=(1, 0)) / det
    return np.einsum("mij,mj...->mi...", J, v) / det.reshape((-1,) + (1,) * (v.ndim - 1))
