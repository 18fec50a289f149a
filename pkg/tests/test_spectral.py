import json

import numpy as np
import pytest
import scipy.linalg as sl

from hdgstokes import spectral as S
from hdgstokes.assembly import constant_pressure
from hdgstokes.fespace import SpaceConfig, build_layout
from hdgstokes.krylov import build_agamma, build_bab, build_mbar

from conftest import discretization, square_mesh


def test_schur_routes_agree_and_kill_constants():
    _, _, _, two, _ = discretization("HDG", 0.5, 0)
    a = S.build_schur_sbar(two, "formula")
    b = S.build_schur_sbar(two, "elimination")
    np.testing.assert_allclose(a, b, atol=1e-9 * np.abs(a).max())
    one = np.ones(a.shape[0])
    assert np.linalg.norm(a @ one) < 1e-9 * np.abs(a).max()
    with pytest.raises(ValueError):
        S.build_schur_sbar(two, "other")


def test_schur_requires_two_field_and_cap():
    _, _, _, two, three = discretization("HDG", 0.5, 0)
    with pytest.raises(ValueError):
        S.build_schur_sbar(three)
    with pytest.raises(S.SizeCapError):
        S.build_schur_sbar(two, max_size=10)


def test_generalized_extremes_against_eigh(rng):
    n = 12
    a = rng.standard_normal((n, n))
    a = a + a.T
    q = rng.standard_normal((n, n))
    b = q @ q.T + n * np.eye(n)
    rep = S.generalized_extremes(a, b, pair="x")
    w = sl.eigh(a, b, eigvals_only=True)
    assert rep.lambda_min == pytest.approx(w[0]) and rep.lambda_max == pytest.approx(w[-1])
    np.testing.assert_allclose(rep.spectrum, w)
    assert rep.n == n
    with pytest.raises(S.IndefiniteError):
        S.generalized_extremes(a, -b)
    with pytest.raises(S.SizeCapError):
        S.generalized_extremes(a, b, max_size=5)


def test_deflation_removes_null_direction(rng):
    n = 8
    z = np.ones(n) / np.sqrt(n)
    Q = np.eye(n) - np.outer(z, z)
    a = Q @ np.diag(np.arange(1.0, n + 1)) @ Q
    rep = S.generalized_extremes(a, np.eye(n), deflation=z)
    assert rep.n == n - 1 and rep.lambda_min > 0.5
    basis = S.complement_basis(z, n)
    np.testing.assert_allclose(basis.T @ basis, np.eye(n - 1), atol=1e-13)
    assert np.abs(basis.T @ z).max() < 1e-13


def test_preconditioned_spectrum_structure():
    _, _, _, two, _ = discretization("HDG", 0.5, 0)
    rep = S.preconditioned_spectrum(two, "PM")
    lo, hi = rep.negative_interval
    plo, phi = rep.positive_interval
    assert lo < hi < 0 < plo <= phi
    # positive eigenvalues of blockdiag(A, M)^-1 [[A, B^T], [B, -C]] with C >= 0 are >= 1
    assert plo >= 1 - 1e-9
    assert rep.min_abs > 1e-3
    with pytest.raises(ValueError):
        S.preconditioner_matrix(discretization("HDG", 0.5, 0)[4])


def test_schur_pairs_positive():
    _, _, _, two, _ = discretization("EDG-HDG", 0.5, 0)
    reps = S.schur_pairs(two, level=0)
    assert [r.pair for r in reps] == ["Sbar/Mbar", "Sbar/BAB"]
    for r in reps:
        assert r.lambda_min > 0 and r.negative_interval is None
    # Sbar <= BAB: the BAB pair is bounded above by the largest energy ratio
    assert reps[1].lambda_max < 10


def test_report_serialization(tmp_path):
    _, _, _, two, _ = discretization("HDG", 0.5, 0)
    rep = S.preconditioned_spectrum(two, "PBAB", level=0, elements=44)
    d = json.loads(rep.to_json(tmp_path / "r.json"))
    assert d["pair"] == "two-field/PBAB" and d["level"] == 0
    path = S.write_spectrum_csv([rep, rep], tmp_path / "s.csv")
    lines = path.read_text().splitlines()
    assert lines[0].startswith("pair,level,elements,n,lambda_min") and len(lines) == 3


def test_relative_drift():
    assert S.relative_drift([2.0, 2.0]) == 0.0
    assert S.relative_drift([1.0, 1.1]) == pytest.approx(0.1)
    assert S.relative_drift([-1.0, -1.2]) == pytest.approx(0.2)


def test_norms_of_constants():
    layout, *_ = discretization("HDG", 0.5, 0)
    m = layout.mesh
    perim = m.local_facet_lengths().sum(axis=1)
    ones = np.ones(layout.n_ubar_all)
    l2 = S.discrete_norms(layout, "facet_L2", ubar=ones)
    assert l2 == pytest.approx(np.sqrt(2 * np.sum(m.h * perim)), rel=1e-12)
    assert S.discrete_norms(layout, "facet_H1", ubar=ones) < 1e-12
    tp = S.discrete_norms(layout, "trace_pressure", pbar=np.ones(layout.n_pbar))
    assert tp == pytest.approx(np.sqrt(np.sum(m.h * perim)), rel=1e-12)
    p1, pb1 = constant_pressure(layout)
    fp = S.discrete_norms(layout, "full_pressure", pbar=pb1, p=p1)
    assert fp == pytest.approx(np.sqrt(tp ** 2 + 4.0), rel=1e-12)
    # the constant field (1, 0) and its trace have zero stability norm
    nb = layout.u_gather.shape[1] // 2
    c3, _ = constant_pressure(build_layout(m, SpaceConfig(3, "HDG")))
    u = np.zeros((m.n_elements, 2, nb))
    u[:, 0] = c3.reshape(m.n_elements, -1)
    ub = np.zeros(layout.n_ubar_all)
    ub[0::2] = 1.0
    assert S.discrete_norms(layout, "velocity_stability", ubar=ub, u=u.ravel()) < 1e-11


def test_norm_argument_errors():
    layout, *_ = discretization("HDG", 0.5, 0)
    with pytest.raises(ValueError):
        S.discrete_norms(layout, "energy", ubar=np.zeros(layout.n_ubar))
    with pytest.raises(ValueError):
        S.discrete_norms(layout, "facet_L2", ubar=np.zeros(3))
    with pytest.raises(ValueError):
        S.discrete_norms(layout, "facet_L2")
    with pytest.raises(ValueError):
        S.discrete_norms(layout, "full_pressure", pbar=np.zeros(layout.n_pbar))
    with pytest.raises(ValueError):
        S.facet_norm_matrix(layout, "facet_H2")


@pytest.mark.parametrize("which", ["facet_L2", "facet_H1"])
def test_norm_matrix_matches_norm(which, rng):
    layout, *_ = discretization("EDG-HDG", 0.5, 0)
    Mx = S.facet_norm_matrix(layout, which)
    x = rng.standard_normal(layout.n_ubar)
    assert np.sqrt(x @ (Mx @ x)) == pytest.approx(S.discrete_norms(layout, which, ubar=x), rel=1e-10)


def test_poincare_constant_bounded():
    c = [S.poincare_constant(build_layout(square_mesh(0.5, 0, r), SpaceConfig(2, "HDG"))) for r in (0, 1)]
    assert all(v > 0 for v in c)
    assert S.relative_drift(c) < 0.5


def test_agamma_dominates_abar():
    layout, _, local, two, _ = discretization("HDG", 0.5, 0)
    rep = S.agamma_extremes(local, 0.1)
    # (A + gamma B^T M^-1 B)^-1 <= A^-1, so Agamma >= Abar
    assert rep.lambda_min >= 1 - 1e-10
    # and Agamma <= Abar^d, the gamma -> infinity limit
    ad = S.generalized_extremes(two.velocity_block, build_agamma(local, 0.0))
    assert rep.lambda_max <= ad.lambda_max * (1 + 1e-10)
    reps = S.verify_h1_equivalence_agamma([square_mesh(0.5, 0)], 0.1)
    assert reps[0].lambda_min == pytest.approx(rep.lambda_min, rel=1e-10)


def test_bab_and_mbar_spd():
    _, _, local, *_ = discretization("EDG", 0.5, 0)
    for m in (build_bab(local), build_mbar(local)):
        assert np.linalg.eigvalsh(m.toarray()).min() > 0
