import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hdgstokes import fespace as FS
from hdgstokes.fespace import SpaceConfig, Variant, build_layout

from conftest import square_mesh


def _triangle_monomial(a, b):
    # integral of x^a y^b over the reference triangle
    return math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)


@pytest.mark.parametrize("degree", range(0, 11))
def test_triangle_quadrature_exact(degree):
    q = FS.triangle_quadrature(degree)
    assert np.all(q.weights > 0)
    assert q.weights.sum() == pytest.approx(0.5, abs=1e-15)
    for a in range(degree + 1):
        b = degree - a
        val = q.weights @ (q.points[:, 0] ** a * q.points[:, 1] ** b)
        assert val == pytest.approx(_triangle_monomial(a, b), rel=1e-13, abs=1e-15)


@pytest.mark.parametrize("degree", range(0, 12))
def test_segment_quadrature_exact(degree):
    q = FS.segment_quadrature(degree)
    assert np.all(q.weights > 0)
    t = q.points[:, 0]
    assert q.weights @ t ** degree == pytest.approx(1.0 / (degree + 1), rel=1e-13)


def test_k0_basis_constant():
    pts = np.array([[0.1, 0.2], [0.7, 0.1], [0.3, 0.3]])
    v, g = FS.eval_basis_element(0, pts)
    assert v.shape == (3, 1)
    np.testing.assert_allclose(v, v[0, 0])
    # orthonormal on the reference triangle of area 1/2
    assert v[0, 0] == pytest.approx(np.sqrt(2.0))
    np.testing.assert_allclose(g, 0.0)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_basis_dimension_and_orthonormality(k):
    q = FS.triangle_quadrature(2 * k)
    v, _ = FS.eval_basis_element(k, q.points)
    assert v.shape[1] == (k + 1) * (k + 2) // 2 == FS.dim_pk(k)
    np.testing.assert_allclose(v.T @ (q.weights[:, None] * v), np.eye(v.shape[1]), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(x=st.floats(0.05, 0.9), y=st.floats(0.05, 0.9))
def test_gradient_matches_finite_differences(x, y):
    k, eps = 2, 1e-6
    p = np.array([[x, y]])
    _, g = FS.eval_basis_element(k, p)
    for d in range(2):
        e = np.zeros(2)
        e[d] = eps
        vp, _ = FS.eval_basis_element(k, p + e)
        vm, _ = FS.eval_basis_element(k, p - e)
        np.testing.assert_allclose(g[0, :, d], (vp - vm)[0] / (2 * eps), atol=1e-6)


@pytest.mark.parametrize("kind", ["gauss", "lobatto"])
def test_facet_basis(kind):
    k = 2
    q = FS.segment_quadrature(2 * k)
    psi = FS.eval_basis_facet(k, q.points[:, 0], kind)
    assert psi.shape[1] == 3
    mass = psi.T @ (q.weights[:, None] * psi)
    assert np.all(np.linalg.eigvalsh(mass) > 0)
    np.testing.assert_allclose(psi.sum(axis=1), 1.0, atol=1e-14)
    # interpolating t^k with the nodal basis is exact, so its integral is too
    nodes = FS.facet_nodes(k, kind)
    coeff = nodes ** k
    assert q.weights @ (psi @ coeff) == pytest.approx(1.0 / (k + 1), rel=1e-13)


def test_two_triangle_layout(two_tri):
    L = build_layout(two_tri, SpaceConfig(2, Variant.HDG))
    assert (L.n_ubar, L.n_pbar, L.n_p, L.n_u) == (6, 15, 6, 24)


def test_unsupported_variant():
    with pytest.raises(FS.ConfigurationError):
        SpaceConfig(2, "DG")
    with pytest.raises(FS.ConfigurationError):
        SpaceConfig(0, "HDG")


@pytest.mark.parametrize("refinements", [0, 1])
def test_hdg_counts_and_variant_ordering(refinements):
    m = square_mesh(0.5, 0, refinements)
    k = 2
    L = {v: build_layout(m, SpaceConfig(k, v)) for v in Variant}
    n_int = len(m.interior_facets)
    assert L[Variant.HDG].n_ubar == 2 * (k + 1) * n_int
    assert L[Variant.HDG].n_pbar == (k + 1) * m.n_facets
    sizes = [L[v].n_two_field for v in (Variant.EDG, Variant.EDG_HDG, Variant.HDG)]
    assert sizes[0] < sizes[1] < sizes[2]


def test_cavity_mesh_dof_counts():
    # reference: 176 elements -> 2574 two-field DOFs (HDG), EDG 1191 < HDG
    m = square_mesh(0.5, 0, 1)
    L = {v: build_layout(m, SpaceConfig(2, v)) for v in Variant}
    hdg = L[Variant.HDG].n_two_field_with_dirichlet
    assert abs(hdg - 2574) / 2574 < 0.05
    assert L[Variant.EDG].n_two_field_with_dirichlet < hdg
    assert abs(L[Variant.HDG].n_three_field_with_dirichlet - 3102) / 3102 < 0.05


@pytest.mark.parametrize("variant", list(Variant))
def test_gathers(variant):
    m = square_mesh(0.5, 2)
    L = build_layout(m, SpaceConfig(2, variant))
    # element DOFs injective
    assert len(np.unique(L.u_gather)) == L.u_gather.size == L.n_u
    assert len(np.unique(L.p_gather)) == L.p_gather.size == L.n_p
    # Dirichlet DOFs never appear in the free gather
    free = L.ubar_gather[L.ubar_gather >= 0]
    assert free.max() < L.n_ubar
    dirichlet = L.ubar_gather_all[L.ubar_gather < 0]
    assert np.all(L.ubar_dirichlet[dirichlet])
    # every Dirichlet DOF sits on the boundary
    xy = L.ubar_dof_xy()[L.dirichlet_ubar]
    assert np.all(np.isclose(np.abs(xy), 1.0).any(axis=1))
