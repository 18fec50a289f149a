"""Static condensation to the two-field (ubar, pbar) and three-field
(ubar, p, pbar) systems, and element-wise recovery of the eliminated fields.

The two-field path eliminates element velocity and pressure through the
element-local oblique projector ``P = I - Ainv B^T S^{-1} B`` onto
``Ker B_pu`` (``S = B_pu A_uu^{-1} B_pu^T``); velocities recovered through
``P`` are divergence-free on every element independently of how accurately
the trace system was solved.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .assembly import LocalBlocks, constant_pressure, scatter, scatter_vector


class ElementAssemblyError(RuntimeError):
    """An element matrix lacks the rank the condensation relies on."""


class SystemKind(str, Enum):
    TWO_FIELD = "two-field"
    THREE_FIELD = "three-field"


def _t(a):
    return np.swapaxes(a, -1, -2)


@dataclass(frozen=True, eq=False)
class LocalCondensed:
    """Per-element factorizations and projectors (leading element axis)."""

    blocks: LocalBlocks
    auu_chol: np.ndarray  # lower Cholesky factor of A_uu^K
    auu_inv: np.ndarray
    spp: np.ndarray  # B_pu A_uu^{-1} B_pu^T
    spp_chol: np.ndarray
    pi: np.ndarray
    proj: np.ndarray  # P = I - Pi
    proj_ainv: np.ndarray  # P A_uu^{-1} (symmetric)

    def apply_proj(self, v: np.ndarray) -> np.ndarray:
        return np.einsum("eij,ej->ei", self.proj, v)


def _spd_inverse(a: np.ndarray, what: str):
    try:
        c = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise ElementAssemblyError(f"{what} is not positive definite on some element") from exc
    cinv = np.linalg.inv(c)
    return c, _t(cinv) @ cinv


def build_local_projector(blocks: LocalBlocks, rank_tol: float = 1e-10) -> LocalCondensed:
    """Factor ``A_uu^K`` and ``S_pp^K`` and form ``Pi^K``, ``P^K`` on every element.

    Raises
    ------
    ElementAssemblyError
        If some ``B_pu^K`` is rank deficient or ``A_uu^K`` is not SPD.
    """
    bpu = blocks.bpu
    sv = np.linalg.svd(bpu, compute_uv=False)
    if np.any(sv[:, -1] <= rank_tol * sv[:, 0]):
        bad = np.flatnonzero(sv[:, -1] <= rank_tol * sv[:, 0])
        raise ElementAssemblyError(f"B_pu is rank deficient on elements {bad[:10].tolist()}")
    chol, ainv = _spd_inverse(blocks.auu, "A_uu")
    ainv = 0.5 * (ainv + _t(ainv))
    ab = ainv @ _t(bpu)
    spp = bpu @ ab
    spp = 0.5 * (spp + _t(spp))
    schol, sinv = _spd_inverse(spp, "B_pu A_uu^-1 B_pu^T")
    pi = ab @ sinv @ bpu
    n = ainv.shape[-1]
    proj = np.eye(n)[None] - pi
    g = ainv - ab @ sinv @ _t(ab)
    g = 0.5 * (g + _t(g))
    return LocalCondensed(blocks, chol, ainv, spp, schol, pi, proj, g)


# ---------------------------------------------------------------------------
# condensed systems


@dataclass(frozen=True, eq=False)
class CondensedSystem:
    """Symmetric indefinite trace system with its null vector.

    Unknown ordering is ``(ubar_free, pbar)`` for the two-field system and
    ``(ubar_free, p, pbar)`` for the three-field system.
    """

    kind: SystemKind
    matrix: sp.csr_matrix
    rhs: np.ndarray
    null_vector: np.ndarray  # unit Euclidean norm
    sizes: tuple
    local: LocalCondensed

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)])

    def split(self, x):
        o = self.offsets
        return tuple(x[o[i]:o[i + 1]] for i in range(len(self.sizes)))

    def block(self, i: int, j: int) -> sp.csr_matrix:
        o = self.offsets
        return self.matrix[o[i]:o[i + 1]][:, o[j]:o[j + 1]].tocsr()

    @property
    def velocity_block(self) -> sp.csr_matrix:
        """``Abar^d`` (two-field) or ``Abar`` (three-field)."""
        return self.block(0, 0)


def _eliminate_dirichlet(local_mats, local_rhs, gather_all, n_all, free_mask, dirichlet_vals):
    """Assemble on the ``all`` numbering, then lift Dirichlet columns to the RHS."""
    K = scatter(local_mats, gather_all, gather_all, (n_all, n_all))
    r = scatter_vector(local_rhs.ravel(), gather_all.ravel(), n_all)
    free = np.flatnonzero(free_mask)
    fixed = np.flatnonzero(~free_mask)
    Kf = K[free]
    rhs = r[free] - Kf[:, fixed] @ dirichlet_vals[fixed]
    mat = Kf[:, free].tocsr()
    mat = 0.5 * (mat + mat.T)
    return mat.tocsr(), rhs


def two_field_local(local: LocalCondensed):
    """Element contributions to the two-field matrix and RHS (trace-local order)."""
    b = local.blocks
    g = local.proj_ainv
    ag = b.aubu @ g
    bg = b.bpbu @ g
    kuu = b.aubub - ag @ _t(b.aubu)
    kup = -ag @ _t(b.bpbu)
    kpp = -bg @ _t(b.bpbu)
    mat = np.concatenate([np.concatenate([kuu, kup], 2), np.concatenate([_t(kup), kpp], 2)], 1)
    rhs = np.concatenate([-np.einsum("eij,ej->ei", ag, b.load),
                          b.pbar_load - np.einsum("eij,ej->ei", bg, b.load)], 1)
    return mat, rhs


def three_field_local(local: LocalCondensed):
    b = local.blocks
    ainv = local.auu_inv
    rows = np.concatenate([b.aubu, b.bpu, b.bpbu], 1)  # (E, nub+np+npb, nu)
    ra = rows @ ainv
    mat = -ra @ _t(rows)
    nub = b.aubu.shape[1]
    mat[:, :nub, :nub] += b.aubub
    rhs = -np.einsum("eij,ej->ei", ra, b.load)
    rhs[:, -b.pbar_load.shape[1]:] += b.pbar_load
    return mat, rhs


def build_two_field(local: LocalCondensed) -> CondensedSystem:
    b = local.blocks
    L = b.layout
    mat, rhs = two_field_local(local)
    gather = np.concatenate([L.ubar_gather_all, L.n_ubar_all + L.pbar_gather], 1)
    n_all = L.n_ubar_all + L.n_pbar
    free = np.concatenate([~L.ubar_dirichlet, np.ones(L.n_pbar, dtype=bool)])
    vals = np.concatenate([b.ubar_bc, np.zeros(L.n_pbar)])
    K, r = _eliminate_dirichlet(mat, rhs, gather, n_all, free, vals)
    z = np.concatenate([np.zeros(L.n_ubar), np.ones(L.n_pbar)])
    return CondensedSystem(SystemKind.TWO_FIELD, K, r, z / np.linalg.norm(z),
                           (L.n_ubar, L.n_pbar), local)


def build_three_field(local: LocalCondensed) -> CondensedSystem:
    b = local.blocks
    L = b.layout
    mat, rhs = three_field_local(local)
    gather = np.concatenate([L.ubar_gather_all, L.n_ubar_all + L.p_gather,
                             L.n_ubar_all + L.n_p + L.pbar_gather], 1)
    n_all = L.n_ubar_all + L.n_p + L.n_pbar
    free = np.concatenate([~L.ubar_dirichlet, np.ones(L.n_p + L.n_pbar, dtype=bool)])
    vals = np.concatenate([b.ubar_bc, np.zeros(L.n_p + L.n_pbar)])
    K, r = _eliminate_dirichlet(mat, rhs, gather, n_all, free, vals)
    p1, pb1 = constant_pressure(L)
    z = np.concatenate([np.zeros(L.n_ubar), p1, pb1])
    return CondensedSystem(SystemKind.THREE_FIELD, K, r, z / np.linalg.norm(z),
                           (L.n_ubar, L.n_p, L.n_pbar), local)


# ---------------------------------------------------------------------------
# recovery


@dataclass(frozen=True, eq=False)
class Solution:
    """Discrete fields; element arrays carry a leading element axis."""

    u: np.ndarray  # (E, 2 dim P_k)
    p: np.ndarray  # (E, dim P_{k-1})
    ubar: np.ndarray  # (n_ubar_all,) including Dirichlet values
    pbar: np.ndarray  # (n_pbar,)

    def shifted(self, c: float, layout) -> "Solution":
        """Add the constant ``c`` to both pressures."""
        p1, pb1 = constant_pressure(layout)
        return Solution(self.u, self.p + c * p1.reshape(self.p.shape), self.ubar, self.pbar + c * pb1)


def back_substitute(system: CondensedSystem, x: np.ndarray) -> Solution:
    """Recover element velocity and pressure from a trace solution.

    For the two-field system ``u = P A_uu^{-1} r`` and
    ``p = S^{-1} B_pu A_uu^{-1} r`` with ``r = L_u - A_ubu^T ubar - B_pbu^T pbar``;
    ``B_pu u = 0`` holds to rounding for any ``x``. For the three-field system
    ``p`` is part of ``x`` and ``u = A_uu^{-1}(r - B_pu^T p)``.
    """
    local = system.local
    b = local.blocks
    L = b.layout
    parts = system.split(np.asarray(x, dtype=float))
    ubar = b.ubar_bc.copy()
    ubar[L.free_ubar] = parts[0]
    pbar = parts[-1]
    r = (b.load
         - np.einsum("eji,ej->ei", b.aubu, ubar[L.ubar_gather_all])
         - np.einsum("eji,ej->ei", b.bpbu, pbar[L.pbar_gather]))
    if system.kind is SystemKind.TWO_FIELD:
        u = np.einsum("eij,ej->ei", local.proj_ainv, r)
        rhs_p = np.einsum("eij,ej->ei", b.bpu @ local.auu_inv, r)
        p = np.linalg.solve(local.spp, rhs_p[..., None])[..., 0]
    else:
        p = parts[1].reshape(L.mesh.n_elements, -1)
        r = r - np.einsum("eji,ej->ei", b.bpu, p)
        u = np.einsum("eij,ej->ei", local.auu_inv, r)
    return Solution(u, p, ubar, pbar.copy())


def solution_from_full(system_full, x: np.ndarray, blocks: LocalBlocks) -> Solution:
    """Map a solution of :func:`assembly.assemble_full_system` to a :class:`Solution`."""
    L = blocks.layout
    u, ub, p, pb = system_full.split(x)
    ubar = blocks.ubar_bc.copy()
    ubar[L.free_ubar] = ub
    E = L.mesh.n_elements
    return Solution(u.reshape(E, -1), p.reshape(E, -1), ubar, pb.copy())
