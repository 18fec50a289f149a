import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from hdgstokes import krylov as K
from hdgstokes.krylov import (BlockPreconditioner, ExactFactorization, PreconConfig, SetupError,
                              StationaryCycles, minres)

from conftest import discretization


def _spd(n, rng, cond=100.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return q @ np.diag(np.geomspace(1, cond, n)) @ q.T


def _saddle(rng, n=30, m=10):
    A = _spd(n, rng)
    B = rng.standard_normal((m, n))
    return A, B, np.block([[A, B.T], [B, np.zeros((m, m))]])


def test_minres_matches_dense_solve(rng):
    A, B, Kd = _saddle(rng)
    b = rng.standard_normal(Kd.shape[0])
    x, rep = minres(Kd, b, tol=1e-12, max_iter=500)
    assert rep.converged
    np.testing.assert_allclose(x, np.linalg.solve(Kd, b), rtol=1e-7, atol=1e-8)
    assert rep.final_residual <= 1e-12


def test_unpreconditioned_residuals_monotone(rng):
    _, _, Kd = _saddle(rng)
    b = rng.standard_normal(Kd.shape[0])
    _, rep = minres(Kd, b, tol=1e-10)
    r = np.array(rep.true_residuals)
    assert np.all(np.diff(r) <= 1e-12)
    # without preconditioning both residual measures agree
    np.testing.assert_allclose(rep.precond_residuals, r, rtol=1e-6, atol=1e-12)


def test_exact_block_preconditioner_converges_in_three_steps(rng):
    """blockdiag(A, B A^-1 B^T) leaves three distinct eigenvalues, so MINRES needs at most 3."""
    A, B, Kd = _saddle(rng)
    S = B @ np.linalg.solve(A, B.T)
    P = np.linalg.inv(np.block([[A, np.zeros((A.shape[0], S.shape[0]))],
                                [np.zeros((S.shape[0], A.shape[0])), S]]))
    b = rng.standard_normal(Kd.shape[0])
    x, rep = minres(Kd, b, precon=P, tol=1e-10)
    assert rep.converged and rep.iterations <= 3
    ev = np.linalg.eigvals(P @ Kd).real
    for lam in (1.0, 0.5 * (1 + np.sqrt(5)), 0.5 * (1 - np.sqrt(5))):
        assert np.min(np.abs(ev - lam)) < 1e-8


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31), n=st.integers(5, 40))
def test_deflated_singular_system(seed, n):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n)
    z /= np.linalg.norm(z)
    Q = np.eye(n) - np.outer(z, z)
    D = np.diag(rng.choice([-1.0, 1.0], n) * rng.uniform(0.5, 3.0, n))
    Kd = Q @ D @ Q
    b = Q @ rng.standard_normal(n)
    x, rep = minres(Kd, b, deflation_basis=z, tol=1e-10, max_iter=4 * n)
    assert rep.converged
    assert abs(z @ x) < 1e-10 * max(1.0, np.linalg.norm(x))
    assert np.linalg.norm(Kd @ x - b) <= 1e-9 * np.linalg.norm(b)
    # pseudo-inverse solution
    np.testing.assert_allclose(x, np.linalg.pinv(Kd) @ b, atol=1e-7 * max(1.0, np.linalg.norm(x)))


def test_preconditioned_stop_criterion(rng):
    A, B, Kd = _saddle(rng)
    P = np.diag(1 / np.abs(np.diag(Kd) + 1.0))
    b = rng.standard_normal(Kd.shape[0])
    _, rep = minres(Kd, b, precon=P, tol=1e-6, stop_on="preconditioned")
    assert rep.converged and rep.precond_residuals[-1] <= 1e-6
    assert np.all(np.diff(rep.precond_residuals) <= 1e-12)
    with pytest.raises(ValueError):
        minres(Kd, b, stop_on="other")


def test_zero_rhs_and_indefinite_preconditioner(rng):
    _, _, Kd = _saddle(rng)
    x, rep = minres(Kd, np.zeros(Kd.shape[0]))
    assert rep.converged and rep.iterations == 0 and not x.any()
    with pytest.raises(SetupError):
        minres(Kd, rng.standard_normal(Kd.shape[0]), precon=-np.eye(Kd.shape[0]))


def test_history_csv(tmp_path, rng):
    _, _, Kd = _saddle(rng)
    _, rep = minres(Kd, rng.standard_normal(Kd.shape[0]), tol=1e-6)
    path = rep.write_history_csv(tmp_path / "h.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,true_residual,preconditioned_residual"
    assert len(lines) == rep.iterations + 2


def test_exact_factorization(rng):
    A = sp.csr_matrix(_spd(25, rng))
    b = rng.standard_normal(25)
    np.testing.assert_allclose(ExactFactorization(A)(b), np.linalg.solve(A.toarray(), b), rtol=1e-9)
    with pytest.raises(SetupError):
        ExactFactorization(sp.diags([1.0, -1.0, 2.0]))


def _dense_map(solver, n):
    return np.column_stack([solver(e) for e in np.eye(n)])


@pytest.mark.parametrize("hierarchy", ["amg", "none"])
def test_stationary_cycles_symmetric_positive(hierarchy):
    layout, _, local, two, _ = discretization("HDG", 0.5, 1)
    A = two.velocity_block
    n = A.shape[0]
    sub = np.arange(0, n, max(1, n // 60))
    S = StationaryCycles(A, cycles=4, hierarchy=hierarchy)
    M = _dense_map(S, n)[sub]
    Ms = M[:, sub]
    np.testing.assert_allclose(Ms, Ms.T, atol=1e-10 * np.abs(Ms).max())
    assert np.linalg.eigvalsh(0.5 * (Ms + Ms.T)).min() > 0


def test_more_cycles_approach_exact(rng):
    _, _, _, two, _ = discretization("HDG", 0.5, 1)
    A = two.velocity_block
    b = rng.standard_normal(A.shape[0])
    xe = ExactFactorization(A)(b)
    errs = [np.linalg.norm(StationaryCycles(A, cycles=c)(b) - xe) for c in (1, 4, 16)]
    assert errs[0] > errs[1] > errs[2]
    with pytest.raises(ValueError):
        StationaryCycles(A, hierarchy="w")


def test_agamma_blocks():
    _, blocks, local, two, three = discretization("HDG", 0.5, 0)
    A0 = K.build_agamma(local, 0.0)
    assert abs(A0 - three.velocity_block).max() < 1e-10 * abs(A0).max()
    # element inverse against the explicit formula
    g = 0.7
    inv = K.agamma_element_inverse(local, g)
    e = 3
    direct = np.linalg.inv(blocks.auu[e] + g * blocks.bpu[e].T @ np.linalg.solve(blocks.m[e], blocks.bpu[e]))
    np.testing.assert_allclose(inv[e], direct, rtol=1e-8, atol=1e-12)
    # large gamma approaches the condensed two-field velocity block
    d = [abs(K.build_agamma(local, g) - two.velocity_block).max() for g in (1.0, 1e3, 1e6)]
    assert d[0] > d[1] > d[2] and d[2] < 1e-4 * abs(two.velocity_block).max()
    with pytest.raises(ValueError):
        K.build_agamma(local, -1.0)


def test_bab_is_spd_including_constants():
    layout, _, local, *_ = discretization("EDG-HDG", 0.5, 0)
    bab = K.build_bab(local)
    one = np.ones(layout.n_pbar)
    assert one @ (bab @ one) > 1e-6 * abs(bab).max()
    assert np.linalg.eigvalsh(bab.toarray()).min() > 0


def test_precon_config_validation():
    cfg = PreconConfig("PBAB", "ExactAgamma", 0.1)
    assert cfg.family is K.Family.PBAB and cfg.label == "PBAB/ExactAgamma(gamma=0.1)"
    assert PreconConfig().label == "PM/ExactAd"
    with pytest.raises(ValueError):
        PreconConfig("P3x3", "ExactAd")
    with pytest.raises(ValueError):
        PreconConfig("PM", "ExactAd", gamma=-0.1)
    with pytest.raises(ValueError):
        PreconConfig("PX")
    with pytest.raises(ValueError):
        PreconConfig(mass="lumped")


def test_family_must_match_system():
    _, _, _, two, three = discretization("HDG", 0.5, 0)
    with pytest.raises(ValueError):
        BlockPreconditioner(two, PreconConfig("P3x3", "ExactAgamma"))
    with pytest.raises(ValueError):
        BlockPreconditioner(three, PreconConfig("PM"))


@pytest.mark.parametrize("cfg", [PreconConfig("PM"), PreconConfig("PBAB"),
                                 PreconConfig("PM", "InnerIterAgamma", 0.1),
                                 PreconConfig("PM", "ExactAd", mass="diagonal")])
def test_two_field_preconditioners_solve(cfg):
    _, _, _, two, _ = discretization("HDG", 0.5, 0)
    P = BlockPreconditioner(two, cfg)
    D = P.dense()
    np.testing.assert_allclose(D, D.T, atol=1e-8 * np.abs(D).max())
    assert np.linalg.eigvalsh(0.5 * (D + D.T)).min() > 0
    x, rep = K.solve_system(two, cfg, tol=1e-8)
    assert rep.converged and rep.iterations < 150
    xd = K.direct_solve(two.matrix, two.rhs, two.null_vector)
    np.testing.assert_allclose(x, xd, atol=1e-5 * np.abs(xd).max())
    assert "precon_setup" in rep.timings


def test_three_field_preconditioner_solve():
    _, _, _, _, three = discretization("EDG", 0.5, 0)
    x, rep = K.solve_system(three, PreconConfig("P3x3", "ExactAgamma", 0.0), tol=1e-8)
    assert rep.converged
    r = three.rhs - three.matrix @ x
    assert np.linalg.norm(r) <= 1e-8 * np.linalg.norm(three.rhs) * 1.0001
    assert abs(three.null_vector @ x) < 1e-10


def test_direct_solve_bordered():
    _, _, _, two, _ = discretization("HDG", 0.5, 0)
    x = K.direct_solve(two.matrix, two.rhs, two.null_vector)
    assert np.linalg.norm(two.matrix @ x - two.rhs) < 1e-10 * np.linalg.norm(two.rhs)
    assert abs(x @ two.null_vector) < 1e-12 * np.linalg.norm(x)
    A = sp.csr_matrix(np.diag([1.0, 2.0]))
    np.testing.assert_allclose(K.direct_solve(A, [1.0, 1.0]), [1.0, 0.5])
