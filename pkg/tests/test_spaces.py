import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amfem.elements import ElementFamily, Family, displacement_basis, quadrature
from amfem.mesh import generate_lshape, generate_unit_square, locate, refine, uniform_refine
from amfem.spaces import (
    FieldPair,
    build_dofmap,
    discrete_h1_matrix,
    discrete_h1_norm,
    divergence_coefficients,
    divergence_matrix,
    displacement_mass,
    edge_ref_points,
    edge_values,
    evaluate_displacement,
    evaluate_stress,
    interpolate_stress,
    project_source,
    prolong_displacement,
    prolong_stress,
    stress_basis,
    stress_jacobian,
    stress_polynomials,
)
from conftest import ALL_ELEMENTS, element_id

RT0 = ElementFamily(Family.RT, 0)
BDM0 = ElementFamily(Family.BDM, 0)


def eval_at_physical(mesh, dm, sigma, tri, pts):
    """Stress at physical points known to lie in triangles ``tri``."""
    J, det, Jinv = mesh.jacobian
    ref = np.einsum("mij,mj->mi", Jinv[tri], pts - mesh.vertices[mesh.triangles[tri, 0]])
    vals = np.stack([evaluate_stress(mesh, dm, sigma, r[None])[t, ..., 0] for t, r in zip(tri, ref)])
    return vals


# -- dof maps -------------------------------------------------------------------


def test_dofmap_counts(square1):
    dm = build_dofmap(square1, RT0, "poisson")
    assert (dm.n_sigma, dm.n_u) == (5, 2)
    dm = build_dofmap(square1, RT0, "stokes")
    assert (dm.n_sigma, dm.n_u, dm.constraint_index, dm.n_total) == (10, 4, 14, 15)
    dm = build_dofmap(square1, BDM0, "poisson")
    assert (dm.n_sigma, dm.n_u) == (10, 2)
    with pytest.raises(ValueError):
        build_dofmap(square1, RT0, "elasticity")


@pytest.mark.parametrize("element", ALL_ELEMENTS, ids=element_id)
def test_dofmap_shared_edges(graded_mesh, element):
    dm = build_dofmap(graded_mesh, element)
    tbl = graded_mesh.edges
    el = stress_basis(element)
    inner = np.flatnonzero(~tbl.boundary)
    for e in inner:
        t0, t1 = tbl.tris[e]
        i0, i1 = tbl.local[e]
        d0 = dm.cell_sigma[t0][el.dof_edge == i0]
        d1 = dm.cell_sigma[t1][el.dof_edge == i1]
        np.testing.assert_array_equal(d0, d1)
    used = np.unique(dm.cell_sigma)
    np.testing.assert_array_equal(used, np.arange(dm.n_scalar_sigma))


@pytest.mark.parametrize("element", ALL_ELEMENTS, ids=element_id)
@pytest.mark.parametrize("kind", ["poisson", "stokes"])
def test_normal_continuity(graded_mesh, element, kind, rng):
    dm = build_dofmap(graded_mesh, element, kind)
    sigma = rng.standard_normal(dm.n_sigma)
    s = np.linspace(0.05, 0.95, 5)
    tris, pts = edge_ref_points(graded_mesh, s)
    poly = stress_polynomials(graded_mesh, dm, sigma)
    vals = edge_values(poly, stress_basis(element).exps, tris, pts)  # (E, 2, R, 2, ns)
    tbl = graded_mesh.edges
    inner = ~tbl.boundary
    vn = np.einsum("ekrcq,ec->ekrq", vals, tbl.normal)[inner]
    np.testing.assert_allclose(vn[:, 0], vn[:, 1], atol=1e-11)
    # edge points seen from both sides are the same physical points
    x0 = np.einsum("eqj,eij->eqi", pts[:, 0], graded_mesh.jacobian[0][tris[:, 0]])
    x1 = np.einsum("eqj,eij->eqi", pts[:, 1], graded_mesh.jacobian[0][tris[:, 1]])
    x0 += graded_mesh.vertices[graded_mesh.triangles[tris[:, 0], 0]][:, None]
    x1 += graded_mesh.vertices[graded_mesh.triangles[tris[:, 1], 0]][:, None]
    np.testing.assert_allclose(x0, x1, atol=1e-14)


# -- projection -----------------------------------------------------------------


def test_project_constants_and_linears(graded_mesh):
    for k in (0, 1):
        c = project_source(graded_mesh, lambda x, y: 3.5 + 0 * x, k)
        assert c.shape == (1, graded_mesh.n_triangles, displacement_basis(k).n)
        np.testing.assert_allclose(c[0, :, 0], 3.5)
        if k:
            np.testing.assert_allclose(c[0, :, 1:], 0, atol=1e-13)
    q = quadrature(2)
    c = project_source(graded_mesh, lambda x, y: x, 1)
    vals = c[0] @ displacement_basis(1).values(q.points)
    np.testing.assert_allclose(vals, graded_mesh.to_physical(q.points)[..., 0], atol=1e-13)


def test_project_x_on_square(square1):
    c = project_source(square1, lambda x, y: x, 0)
    np.testing.assert_allclose(c[0, :, 0], [2 / 3, 1 / 3], atol=1e-14)


@pytest.mark.parametrize("k", [0, 1])
def test_projection_residual_orthogonal(graded_mesh, k):
    # a quartic source: every integral below is exact at degree 6
    f = lambda x, y: x**3 * y - 2 * y**2 + x
    c = project_source(graded_mesh, f, k, degree=6)
    q = quadrature(6)
    P = displacement_basis(k).values(q.points)
    phys = graded_mesh.to_physical(q.points)
    r = f(phys[..., 0], phys[..., 1]) - c[0] @ P
    np.testing.assert_allclose(np.einsum("mq,lq,q->ml", r, P, q.weights), 0, atol=1e-13)


def test_projection_error_decreases_under_refinement():
    f = lambda x, y: np.sin(3 * x) * np.exp(y)
    mesh = generate_lshape(1)
    q = quadrature(6)
    prev = math.inf
    for _ in range(4):
        c = project_source(mesh, f, 0)
        phys = mesh.to_physical(q.points)
        r = f(phys[..., 0], phys[..., 1]) - c[0] @ displacement_basis(0).values(q.points)
        err = np.einsum("mq,q,m->", r**2, q.weights, mesh.jacobian[1])
        assert err < prev
        prev = err
        mesh = uniform_refine(mesh, 1)


def test_project_vector_source(graded_mesh):
    c = project_source(graded_mesh, lambda x, y: np.stack([1 + 0 * x, 2 + 0 * y]), 0, 2)
    np.testing.assert_allclose(c[0], 1.0)
    np.testing.assert_allclose(c[1], 2.0)


# -- discrete H1 norm -----------------------------------------------------------


def test_discrete_norm_examples(square1):
    dm = build_dofmap(square1, RT0)
    assert discrete_h1_norm(square1, dm, np.zeros(2)) == 0.0
    assert discrete_h1_norm(square1, dm, np.ones(2)) == pytest.approx(2.0)
    assert discrete_h1_norm(square1, dm, np.array([1.0, 0.0])) == pytest.approx(math.sqrt(3))
    assert discrete_h1_norm(square1, dm, np.array([0.0, 1.0])) == pytest.approx(math.sqrt(3))


def test_discrete_norm_subset(square1):
    dm = build_dofmap(square1, RT0)
    u = np.array([1.0, 0.0])
    # triangle 0 holds the value 1: its two boundary edges plus the diagonal
    assert discrete_h1_norm(square1, dm, u, subset=[0]) == pytest.approx(math.sqrt(3))
    assert discrete_h1_norm(square1, dm, u, subset=[1]) == pytest.approx(1.0)
    assert discrete_h1_norm(square1, dm, u, subset=[]) == 0.0
    with pytest.raises(IndexError):
        discrete_h1_norm(square1, dm, u, subset=[2])


@pytest.mark.parametrize("element", [RT0, ElementFamily(Family.RT, 1)], ids=element_id)
@pytest.mark.parametrize("kind", ["poisson", "stokes"])
def test_discrete_norm_matrix_matches(graded_mesh, element, kind, rng):
    dm = build_dofmap(graded_mesh, element, kind)
    D = discrete_h1_matrix(graded_mesh, dm).toarray()
    np.testing.assert_allclose(D, D.T, atol=1e-13)
    assert np.linalg.eigvalsh(D).min() > 1e-8
    for _ in range(3):
        u = rng.standard_normal(dm.n_u)
        assert math.sqrt(u @ D @ u) == pytest.approx(discrete_h1_norm(graded_mesh, dm, u), rel=1e-12)


def test_discrete_norm_linear_function():
    # a continuous P1 function: only gradients and boundary traces remain
    mesh = generate_unit_square(2)
    dm = build_dofmap(mesh, ElementFamily(Family.RT, 1))
    c = project_source(mesh, lambda x, y: x, 1).ravel()
    # |grad x|^2 = 1; traces weighted by 1/|E| = 2: side x=1 gives 2, sides y=0, y=1 give
    # 2 * (1/24 + 7/24) each
    assert discrete_h1_norm(mesh, dm, c) ** 2 == pytest.approx(1 + 2 + 4 / 3, rel=1e-12)


# -- divergence -----------------------------------------------------------------


def test_divergence_matrix_rt0_fluxes(square1):
    dm = build_dofmap(square1, RT0)
    B = divergence_matrix(square1, dm).toarray()
    tbl = square1.edges
    np.testing.assert_allclose(np.abs(B), (np.abs(B) > 0) * tbl.length[None, :], atol=1e-14)
    for e in range(tbl.n):
        assert np.count_nonzero(B[:, e]) == (1 if tbl.boundary[e] else 2)
    inner = ~tbl.boundary
    np.testing.assert_allclose(B[:, inner].sum(axis=0), 0, atol=1e-14)
    np.testing.assert_array_equal(B @ np.zeros(dm.n_sigma), 0)


@pytest.mark.parametrize("element", ALL_ELEMENTS, ids=element_id)
@pytest.mark.parametrize("kind", ["poisson", "stokes"])
def test_divergence_in_displacement_space(graded_mesh, element, kind, rng):
    dm = build_dofmap(graded_mesh, element, kind)
    sigma = rng.standard_normal(dm.n_sigma)
    B = divergence_matrix(graded_mesh, dm)
    Mu = displacement_mass(graded_mesh, dm)
    dc = divergence_coefficients(graded_mesh, dm, sigma)
    np.testing.assert_allclose(Mu @ dc, B @ sigma, atol=1e-11)
    # pointwise: trace of the stress Jacobian equals the reconstructed divergence
    q = quadrature(3)
    Dj = stress_jacobian(graded_mesh, dm, sigma, q.points)
    div = Dj[:, :, 0, 0] + Dj[:, :, 1, 1]
    np.testing.assert_allclose(evaluate_displacement(graded_mesh, dm, dc, q.points), div, atol=1e-10)


@pytest.mark.parametrize("element", [RT0, BDM0, ElementFamily(Family.RT, 1)], ids=element_id)
def test_divergence_nested(element):
    coarse = generate_lshape(1)
    fine = refine(uniform_refine(coarse, 1), [0, 3, 7])
    dH = build_dofmap(coarse, element)
    dh = build_dofmap(fine, element)
    parent = locate(coarse, fine)
    for j in range(dH.n_sigma):
        e = np.zeros(dH.n_sigma)
        e[j] = 1.0
        pf = prolong_stress(coarse, dH, e, fine, dh, parent)
        lhs = divergence_coefficients(fine, dh, pf)
        rhs = prolong_displacement(coarse, dH, divergence_coefficients(coarse, dH, e), fine, dh, parent)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


# -- interpolation and transfer -------------------------------------------------


def test_interpolation_reproduces_space_members(square1):
    dm = build_dofmap(square1, BDM0)
    s = interpolate_stress(square1, dm, lambda x, y: np.array([y, 0 * x]))
    q = quadrature(2)
    phys = square1.to_physical(q.points)
    vals = evaluate_stress(square1, dm, s, q.points)[:, 0]
    np.testing.assert_allclose(vals[:, 0], phys[..., 1], atol=1e-14)
    np.testing.assert_allclose(vals[:, 1], 0, atol=1e-14)
    dm0 = build_dofmap(square1, RT0)
    s0 = interpolate_stress(square1, dm0, lambda x, y: np.array([x + 1, y - 2]))
    vals = evaluate_stress(square1, dm0, s0, q.points)[:, 0]
    np.testing.assert_allclose(vals[:, 0], phys[..., 0] + 1, atol=1e-14)


@pytest.mark.parametrize("element", ALL_ELEMENTS, ids=element_id)
def test_commuting_interpolation(graded_mesh, element):
    dm = build_dofmap(graded_mesh, element)
    field = lambda x, y: np.array([np.sin(x) * y**2, np.exp(x - y)])
    div = lambda x, y: np.cos(x) * y**2 - np.exp(x - y)
    s = interpolate_stress(graded_mesh, dm, field)
    lhs = divergence_coefficients(graded_mesh, dm, s)
    rhs = project_source(graded_mesh, div, element.order, degree=6).ravel()
    # equal up to the quadrature error of the smooth field in the dof moments
    np.testing.assert_allclose(lhs, rhs, atol=1e-4)


@pytest.mark.parametrize("element", ALL_ELEMENTS, ids=element_id)
@pytest.mark.parametrize("kind", ["poisson", "stokes"])
def test_prolongation_is_exact(graded_mesh, element, kind, rng):
    fine = refine(graded_mesh, [0, 2, 5], rule="bisec3")
    dH = build_dofmap(graded_mesh, element, kind)
    dh = build_dofmap(fine, element, kind)
    sigma = rng.standard_normal(dH.n_sigma)
    u = rng.standard_normal(dH.n_u)
    parent = locate(graded_mesh, fine)
    sf = prolong_stress(graded_mesh, dH, sigma, fine, dh, parent)
    uf = prolong_displacement(graded_mesh, dH, u, fine, dh, parent)
    pts = fine.vertices[fine.triangles].mean(axis=1)
    np.testing.assert_allclose(eval_at_physical(fine, dh, sf, np.arange(fine.n_triangles), pts),
                               eval_at_physical(graded_mesh, dH, sigma, parent, pts), atol=1e-11)
    c = np.array([[1 / 3, 1 / 3]])
    J, det, Jinv = graded_mesh.jacobian
    ref = np.einsum("mij,mj->mi", Jinv[parent], pts - graded_mesh.vertices[graded_mesh.triangles[parent, 0]])
    coarse_u = np.stack([evaluate_displacement(graded_mesh, dH, u, r[None])[t, :, 0] for t, r in zip(parent, ref)])
    np.testing.assert_allclose(evaluate_displacement(fine, dh, uf, c)[:, :, 0], coarse_u, atol=1e-12)


def test_field_pair_length_check(square1):
    dm = build_dofmap(square1, RT0)
    with pytest.raises(ValueError):
        FieldPair(np.zeros(4), np.zeros(2), square1, dm)


@settings(max_examples=30)
@given(marks=st.lists(st.integers(0, 5), min_size=1, max_size=3),
       seed=st.integers(0, 2**32 - 1))
def test_normal_continuity_random_meshes(marks, seed):
    mesh = refine(generate_lshape(1), marks)
    mesh = refine(mesh, [m % mesh.n_triangles for m in marks], rule="bisec3")
    dm = build_dofmap(mesh, ElementFamily(Family.RT, 1))
    sigma = np.random.default_rng(seed).standard_normal(dm.n_sigma)
    tris, pts = edge_ref_points(mesh, np.array([0.2, 0.7]))
    vals = edge_values(stress_polynomials(mesh, dm, sigma), stress_basis(dm.element).exps, tris, pts)
    vn = np.einsum("ekrcq,ec->ekrq", vals, mesh.edges.normal)[~mesh.edges.boundary]
    np.testing.assert_allclose(vn[:, 0], vn[:, 1], atol=1e-10)
