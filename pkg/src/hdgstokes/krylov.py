"""Preconditioned MINRES with null-space deflation and the block
preconditioners for the condensed Stokes systems.

Preconditioners for the two-field system are
``blockdiag(Rbar^d, Mbar)`` ("PM") and ``blockdiag(Rbar^d, B_pbu A_uu^-1 B_pbu^T)``
("PBAB"); the three-field system uses ``blockdiag(Rbar, M, Mbar)`` ("P3x3").
Every block inverse is applied by an :class:`InnerSolver`, which is a fixed
linear SPD operator so MINRES stays valid.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .assembly import block_diagonal, scatter
from .condensation import CondensedSystem, LocalCondensed, SystemKind


class SetupError(RuntimeError):
    """A preconditioner block could not be factored or is not SPD."""


# ---------------------------------------------------------------------------
# MINRES


@dataclass
class SolveReport:
    """Outcome of one MINRES run plus whatever the caller attaches later."""

    iterations: int = 0
    converged: bool = False
    true_residuals: list = field(default_factory=list)
    precond_residuals: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    @property
    def final_residual(self) -> float:
        return self.true_residuals[-1] if self.true_residuals else np.nan

    def write_history_csv(self, path) -> Path:
        """Write ``iteration, true_residual, preconditioned_residual`` rows."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "true_residual", "preconditioned_residual"])
            for i, (t, p) in enumerate(zip(self.true_residuals, self.precond_residuals)):
                w.writerow([i, f"{t:.16e}", f"{p:.16e}"])
        return path


def _as_apply(op) -> Callable[[np.ndarray], np.ndarray]:
    if op is None:
        return lambda v: v.copy()
    if callable(op) and not hasattr(op, "matvec"):
        return op
    return sla.aslinearoperator(op).matvec


def _orthonormal(basis, n) -> Optional[np.ndarray]:
    if basis is None:
        return None
    Z = np.asarray(basis, dtype=float).reshape(n, -1)
    q, _ = np.linalg.qr(Z)
    return q


def minres(operator, rhs, precon=None, deflation_basis=None, tol: float = 1e-8,
           max_iter: int = 500, x0=None, stop_on: str = "true"):
    """Preconditioned MINRES for symmetric, possibly singular, systems.

    Parameters
    ----------
    operator : sparse matrix, LinearOperator or callable
        Symmetric system matrix.
    rhs : ndarray
    precon : sparse matrix, LinearOperator or callable, optional
        Action of the SPD preconditioner inverse.
    deflation_basis : ndarray, optional
        Columns spanning the null space. The RHS, every operator output, every
        preconditioner output and the final iterate are projected onto its
        Euclidean orthogonal complement.
    tol : float
        Relative residual tolerance.
    stop_on : {"true", "preconditioned"}
        ``"true"`` recomputes ``||b - A x|| / ||b||`` every iteration;
        ``"preconditioned"`` uses the recurrence's preconditioned residual norm.

    Returns
    -------
    x : ndarray
    report : SolveReport
    """
    if stop_on not in ("true", "preconditioned"):
        raise ValueError("stop_on must be 'true' or 'preconditioned'")
    t0 = time.perf_counter()
    b = np.asarray(rhs, dtype=float).copy()
    n = b.size
    Z = _orthonormal(deflation_basis, n)

    def proj(v):
        return v if Z is None else v - Z @ (Z.T @ v)

    A = _as_apply(operator)
    Minv = _as_apply(precon)
    Aop = lambda v: proj(A(v))
    Pop = lambda v: proj(Minv(v))

    report = SolveReport()
    b = proj(b)
    bnorm = np.linalg.norm(b)
    x = np.zeros(n) if x0 is None else proj(np.asarray(x0, dtype=float).copy())
    if bnorm == 0.0:
        report.converged = True
        report.true_residuals.append(0.0)
        report.precond_residuals.append(0.0)
        report.timings["iterations"] = time.perf_counter() - t0
        return x, report

    v = b - Aop(x)
    z = Pop(v)
    g2 = v @ z
    if g2 < 0:
        raise SetupError("preconditioner is not positive definite")
    gamma = np.sqrt(g2)
    gamma1 = gamma
    rel = np.linalg.norm(v) / bnorm
    report.true_residuals.append(rel)
    report.precond_residuals.append(1.0)
    if (rel if stop_on == "true" else 1.0) <= tol or gamma == 0.0:
        report.converged = True
        report.timings["iterations"] = time.perf_counter() - t0
        return x, report

    v_old = np.zeros(n)
    w = np.zeros(n)
    w_old = np.zeros(n)
    gamma_old = 1.0
    eta = gamma
    s_old = s = 0.0
    c_old = c = 1.0
    for it in range(1, max_iter + 1):
        z = z / gamma
        Az = Aop(z)
        delta = Az @ z
        v_new = Az - (delta / gamma) * v - (gamma / gamma_old) * v_old
        z_new = Pop(v_new)
        g2 = v_new @ z_new
        if g2 < -1e-14 * abs(delta) * gamma:
            raise SetupError("preconditioner is not positive definite")
        gamma_new = np.sqrt(max(g2, 0.0))
        a0 = c * delta - c_old * s * gamma
        a1 = np.hypot(a0, gamma_new)
        a2 = s * delta + c_old * c * gamma
        a3 = s_old * gamma
        c_new = a0 / a1
        s_new = gamma_new / a1
        w_new = (z - a3 * w_old - a2 * w) / a1
        x = x + (c_new * eta) * w_new
        eta = -s_new * eta

        r = b - Aop(x)
        rel = np.linalg.norm(r) / bnorm
        prel = abs(eta) / gamma1
        report.true_residuals.append(rel)
        report.precond_residuals.append(prel)
        report.iterations = it
        if (rel if stop_on == "true" else prel) <= tol:
            report.converged = True
            break
        if gamma_new == 0.0:  # Krylov space exhausted
            break
        v_old, v = v, v_new
        w_old, w = w, w_new
        z = z_new
        gamma_old, gamma = gamma, gamma_new
        s_old, s = s, s_new
        c_old, c = c, c_new
    x = proj(x)
    report.timings["iterations"] = time.perf_counter() - t0
    return x, report


# ---------------------------------------------------------------------------
# inner SPD solvers


class InnerSolver:
    """Approximate or exact inverse of an SPD matrix; a fixed linear map."""

    def __init__(self, matrix):
        self.matrix = sp.csr_matrix(matrix)
        self.n = self.matrix.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def __call__(self, rhs: np.ndarray) -> np.ndarray:
        return self.solve(rhs)

    def as_linear_operator(self) -> sla.LinearOperator:
        return sla.LinearOperator((self.n, self.n), matvec=self.solve, dtype=float)


class ExactFactorization(InnerSolver):
    """Sparse LU with a symmetric fill-reducing ordering and no pivoting.

    With diagonal pivoting the diagonal of ``U`` carries the ``D`` of an
    ``L D L^T`` factorization, so SPD-ness is checked through its signs.
    """

    def __init__(self, matrix, check_spd: bool = True):
        super().__init__(matrix)
        try:
            self.lu = sla.splu(self.matrix.tocsc(), permc_spec="MMD_AT_PLUS_A",
                               diag_pivot_thresh=0.0, options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise SetupError(f"factorization failed: {exc}") from exc
        if check_spd:
            d = self.lu.U.diagonal()
            if np.any(d <= 0) or not np.all(np.isfinite(d)):
                raise SetupError("matrix is not positive definite (non-positive pivot)")

    def solve(self, rhs):
        return self.lu.solve(np.asarray(rhs, dtype=float))


class DiagonalScaling(InnerSolver):
    def __init__(self, matrix):
        super().__init__(matrix)
        d = self.matrix.diagonal()
        if np.any(d <= 0):
            raise SetupError("non-positive diagonal")
        self.dinv = 1.0 / d

    def solve(self, rhs):
        return self.dinv * rhs


class StationaryCycles(InnerSolver):
    """A fixed number of stationary cycles started from zero.

    ``hierarchy="amg"`` runs ``cycles`` classical (Ruge-Stueben) AMG V-cycles
    with ``sweeps`` symmetric Gauss-Seidel pre- and post-smoothing steps;
    ``hierarchy="none"`` runs ``cycles`` x ``sweeps`` plain symmetric
    Gauss-Seidel sweeps. Both are symmetric positive-definite linear maps.
    """

    def __init__(self, matrix, cycles: int = 4, sweeps: int = 1, hierarchy: str = "amg"):
        super().__init__(matrix)
        if hierarchy not in ("amg", "none"):
            raise ValueError("hierarchy must be 'amg' or 'none'")
        if np.any(self.matrix.diagonal() <= 0):
            raise SetupError("non-positive diagonal")
        self.cycles, self.sweeps, self.hierarchy = int(cycles), int(sweeps), hierarchy
        if hierarchy == "amg":
            import pyamg

            smoother = ("gauss_seidel", {"sweep": "symmetric", "iterations": self.sweeps})
            self.ml = pyamg.ruge_stuben_solver(self.matrix, presmoother=smoother,
                                               postsmoother=smoother, max_coarse=50)

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if self.hierarchy == "amg":
            x = np.zeros_like(rhs)
            for _ in range(self.cycles):
                x = self.ml.solve(rhs, x0=x, tol=1e-300, maxiter=1, cycle="V")
            return x
        from pyamg.relaxation.relaxation import gauss_seidel

        x = np.zeros_like(rhs)
        gauss_seidel(self.matrix, x, rhs, iterations=self.cycles * self.sweeps, sweep="symmetric")
        return x


@dataclass(frozen=True)
class InnerSettings:
    """How a velocity block inverse is applied when cycles are requested."""

    cycles: int = 4
    sweeps: int = 1
    hierarchy: str = "amg"

    def make(self, matrix) -> StationaryCycles:
        return StationaryCycles(matrix, self.cycles, self.sweeps, self.hierarchy)


# ---------------------------------------------------------------------------
# preconditioner blocks


def build_agamma(local: LocalCondensed, gamma: float, free_only: bool = True) -> sp.csr_matrix:
    """Trace velocity operator ``A_ubub - A_ubu (A_uu + gamma B^T M^-1 B)^-1 A_ubu^T``.

    The element inverse uses the Woodbury form
    ``A^-1 - A^-1 B^T (M/gamma + B A^-1 B^T)^-1 B A^-1``. For ``gamma = 0``
    this is the three-field velocity block ``Abar``.
    """
    if gamma < 0 or not np.isfinite(gamma):
        raise ValueError("gamma must be finite and nonnegative")
    b = local.blocks
    L = b.layout
    inv = agamma_element_inverse(local, gamma)
    au = b.aubu @ inv
    kloc = b.aubub - au @ np.swapaxes(b.aubu, 1, 2)
    K = scatter(kloc, L.ubar_gather_all, L.ubar_gather_all, (L.n_ubar_all, L.n_ubar_all))
    if free_only:
        f = L.free_ubar
        K = K[f][:, f]
    K = 0.5 * (K + K.T)
    return K.tocsr()


def agamma_element_inverse(local: LocalCondensed, gamma: float) -> np.ndarray:
    """``(A_uu + gamma B_pu^T M^-1 B_pu)^-1`` per element, via Woodbury."""
    ainv = local.auu_inv
    if gamma == 0:
        return ainv
    b = local.blocks
    ab = ainv @ np.swapaxes(b.bpu, 1, 2)
    core = b.m / gamma + local.spp
    inv = ainv - ab @ np.linalg.solve(core, np.swapaxes(ab, 1, 2))
    return 0.5 * (inv + np.swapaxes(inv, 1, 2))


def build_bab(local: LocalCondensed) -> sp.csr_matrix:
    """``B_pbu A_uu^-1 B_pbu^T`` assembled element-wise.

    The matrix is SPD: a constant trace pressure gives ``B_pbu^T 1 = -B_pu^T c``,
    which is not zero, so constants are not in its kernel.
    """
    b = local.blocks
    L = b.layout
    kloc = b.bpbu @ local.auu_inv @ np.swapaxes(b.bpbu, 1, 2)
    K = scatter(kloc, L.pbar_gather, L.pbar_gather, (L.n_pbar, L.n_pbar))
    return (0.5 * (K + K.T)).tocsr()


def build_mbar(local: LocalCondensed) -> sp.csr_matrix:
    b = local.blocks
    L = b.layout
    return scatter(b.mbar, L.pbar_gather, L.pbar_gather, (L.n_pbar, L.n_pbar))


class Family(str, Enum):
    PM = "PM"
    PBAB = "PBAB"
    P3x3 = "P3x3"


class RdChoice(str, Enum):
    EXACT_AD = "ExactAd"
    EXACT_AGAMMA = "ExactAgamma"
    INNER_ITER_AGAMMA = "InnerIterAgamma"
    INNER_ITER_AD = "InnerIterAd"


@dataclass(frozen=True)
class PreconConfig:
    """Block preconditioner choice.

    ``rd_choice`` selects the velocity block: ``Abar^d`` or ``Abar_gamma``,
    inverted exactly or by :class:`StationaryCycles` with ``inner`` settings.
    For ``P3x3`` the ``Ad`` choices are not available and ``Abar_gamma`` is
    used with the given ``gamma``.
    """

    family: Family = Family.PM
    rd_choice: RdChoice = RdChoice.EXACT_AD
    gamma: float = 0.0
    inner: InnerSettings = InnerSettings()
    mass: str = "exact"  # or "diagonal"

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "rd_choice", RdChoice(self.rd_choice))
        if self.gamma < 0 or not np.isfinite(self.gamma):
            raise ValueError("gamma must be finite and nonnegative")
        if self.mass not in ("exact", "diagonal"):
            raise ValueError("mass must be 'exact' or 'diagonal'")
        if self.family is Family.P3x3 and self.rd_choice in (RdChoice.EXACT_AD, RdChoice.INNER_ITER_AD):
            raise ValueError("P3x3 uses Abar_gamma; choose ExactAgamma or InnerIterAgamma")

    @property
    def label(self) -> str:
        s = f"{self.family.value}/{self.rd_choice.value}"
        if self.rd_choice in (RdChoice.EXACT_AGAMMA, RdChoice.INNER_ITER_AGAMMA):
            s += f"(gamma={self.gamma:g})"
        return s


class BlockPreconditioner:
    """Block-diagonal preconditioner; call it on a residual to apply the inverse."""

    def __init__(self, system: CondensedSystem, cfg: PreconConfig):
        t0 = time.perf_counter()
        if (cfg.family is Family.P3x3) != (system.kind is SystemKind.THREE_FIELD):
            raise ValueError(f"{cfg.family.value} does not match a {system.kind.value} system")
        self.system, self.cfg = system, cfg
        local = system.local
        rd = cfg.rd_choice
        if rd in (RdChoice.EXACT_AD, RdChoice.INNER_ITER_AD):
            vel = system.velocity_block
        else:
            vel = build_agamma(local, cfg.gamma)
        exact = rd in (RdChoice.EXACT_AD, RdChoice.EXACT_AGAMMA)
        self.velocity_matrix = vel
        solvers = [ExactFactorization(vel) if exact else cfg.inner.make(vel)]
        mass_solver = ExactFactorization if cfg.mass == "exact" else DiagonalScaling
        if cfg.family is Family.P3x3:
            solvers.append(mass_solver(block_diagonal(local.blocks.m)))
            solvers.append(mass_solver(build_mbar(local)))
        elif cfg.family is Family.PM:
            solvers.append(mass_solver(build_mbar(local)))
        else:
            # B_pbu^T 1 = -B_pu^T c is nonzero, so BAB is SPD (constants included)
            solvers.append(ExactFactorization(build_bab(local)))
        self.solvers = solvers
        self.offsets = system.offsets
        self.setup_time = time.perf_counter() - t0

    def __call__(self, r: np.ndarray) -> np.ndarray:
        o = self.offsets
        out = np.empty_like(r, dtype=float)
        for i, s in enumerate(self.solvers):
            out[o[i]:o[i + 1]] = s.solve(r[o[i]:o[i + 1]])
        return out

    def as_linear_operator(self) -> sla.LinearOperator:
        n = self.offsets[-1]
        return sla.LinearOperator((n, n), matvec=self.__call__, dtype=float)

    def dense(self) -> np.ndarray:
        """Dense matrix of the preconditioner inverse (small systems only)."""
        n = self.offsets[-1]
        return np.column_stack([self(e) for e in np.eye(n)])


def solve_system(system: CondensedSystem, cfg: PreconConfig, tol: float = 1e-8,
                 max_iter: int = 500, stop_on: str = "true"):
    """Build the preconditioner and run deflated MINRES on ``system``."""
    P = BlockPreconditioner(system, cfg)
    x, report = minres(system.matrix, system.rhs, P, system.null_vector, tol=tol,
                       max_iter=max_iter, stop_on=stop_on)
    report.timings["precon_setup"] = P.setup_time
    return x, report


def direct_solve(matrix, rhs, null_vector=None):
    """Sparse direct solve, bordered by the null vector when one is given.

    Solves ``[K z; z^T 0] [x; mu] = [b; 0]``, which returns the solution
    orthogonal to ``z`` (``mu`` vanishes for consistent ``b``).
    """
    K = sp.csr_matrix(matrix)
    b = np.asarray(rhs, dtype=float)
    if null_vector is None:
        return sla.splu(K.tocsc()).solve(b)
    z = np.asarray(null_vector, dtype=float)[:, None]
    Kb = sp.bmat([[K, sp.csr_matrix(z)], [sp.csr_matrix(z.T), None]], format="csc")
    x = sla.splu(Kb).solve(np.append(b, 0.0))
    return x[:-1]
