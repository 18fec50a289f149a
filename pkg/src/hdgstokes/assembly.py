"""Element matrices of the HDG Stokes forms and their global assembly.

All element-level routines are vectorized over elements: local blocks are
stored as stacked dense arrays with a leading element axis. Local orderings:

* element velocity: ``(component, basis)``, size ``2 dim P_k``
* element pressure: ``basis``, size ``dim P_{k-1}``
* trace velocity: ``(local facet, component, node)``, size ``6 (k+1)``
* trace pressure: ``(local facet, node)``, size ``3 (k+1)``

Viscosity is 1. ``A_ubu`` denotes the trace/element coupling block (rows:
trace velocity, columns: element velocity) and ``B_pbu`` the trace
pressure/element velocity block.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.io
import scipy.sparse as sp

from .fespace import (DofLayout, Variant, dim_pk, eval_basis_element, eval_basis_facet,
                      segment_quadrature, triangle_quadrature)

_REF_VERTS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def default_alpha(k: int, variant) -> float:
    """Penalty used in the 2D experiments: 6k^2 for HDG, 4k^2 for EDG variants."""
    return 6.0 * k * k if Variant(variant) is Variant.HDG else 4.0 * k * k


@dataclass(frozen=True)
class AssemblyConfig:
    alpha: Optional[float] = None
    gamma: float = 0.0

    def __post_init__(self):
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise ValueError("gamma must be finite and nonnegative")

    def resolve_alpha(self, layout: DofLayout) -> float:
        return self.alpha if self.alpha is not None else default_alpha(layout.k, layout.cfg.variant)


# ---------------------------------------------------------------------------
# geometry and basis tables


@dataclass(frozen=True, eq=False)
class ElementData:
    """Basis tables at element and facet quadrature points, per element."""

    det: np.ndarray  # (E,) = 2 |K|
    jinv_t: np.ndarray  # (E, 2, 2)
    xq: np.ndarray  # (E, nq, 2) physical element quadrature points
    wq: np.ndarray  # (E, nq) physical weights
    phi: np.ndarray  # (E, nq, nb)
    dphi: np.ndarray  # (E, nq, nb, 2)
    q: np.ndarray  # (E, nq, nbp) pressure basis
    xf: np.ndarray  # (E, 3, nqf, 2)
    wf: np.ndarray  # (E, 3, nqf)
    phi_f: np.ndarray  # (E, 3, nqf, nb)
    dn_phi_f: np.ndarray  # (E, 3, nqf, nb)
    psi_u: np.ndarray  # (nqf, k+1) velocity trace basis
    psi_p: np.ndarray  # (nqf, k+1) pressure trace basis
    normals: np.ndarray  # (E, 3, 2)
    h: np.ndarray  # (E,)


def element_data(layout: DofLayout, elements=None) -> ElementData:
    mesh = layout.mesh
    k = layout.k
    cache_key = ("element_data", k, layout.velocity_trace.node_kind, layout.pressure_trace.node_kind)
    if elements is None and cache_key in mesh._cache:
        return mesh._cache[cache_key]
    idx = np.arange(mesh.n_elements) if elements is None else np.atleast_1d(elements)

    verts = mesh.vertices[mesh.elements[idx]]  # (E, 3, 2)
    J = np.stack([verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 0]], axis=-1)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    jinv = np.linalg.inv(J)
    jinv_t = np.swapaxes(jinv, 1, 2)
    scale = 1.0 / np.sqrt(det)

    qe = triangle_quadrature(2 * k + 2)
    v_hat, g_hat = eval_basis_element(k, qe.points)
    p_hat, _ = eval_basis_element(k - 1, qe.points)
    xq = verts[:, 0, None, :] + np.einsum("eij,qj->eqi", J, qe.points)
    wq = det[:, None] * qe.weights[None, :]
    phi = scale[:, None, None] * v_hat[None]
    dphi = scale[:, None, None, None] * np.einsum("eij,qbj->eqbi", jinv_t, g_hat)
    q = scale[:, None, None] * p_hat[None]

    qf = segment_quadrature(2 * k + 1)
    t = qf.points[:, 0]
    facets = mesh.element_facets[idx]  # (E, 3)
    same = mesh.elements[idx] == mesh.facets[facets, 0]  # local edge runs a -> b
    tau = np.where(same[..., None], t[None, None, :], 1.0 - t[None, None, :])  # (E, 3, nqf)
    r0 = _REF_VERTS
    r1 = np.roll(_REF_VERTS, -1, axis=0)
    xi = r0[None, :, None, :] + tau[..., None] * (r1 - r0)[None, :, None, :]
    vf_hat, gf_hat = eval_basis_element(k, xi)
    phi_f = scale[:, None, None, None] * vf_hat
    grad_f = scale[:, None, None, None, None] * np.einsum("eij,efqbj->efqbi", jinv_t, gf_hat)
    normals = mesh.local_normals()[idx]
    dn_phi_f = np.einsum("efqbi,efi->efqb", grad_f, normals)
    lengths = mesh.local_facet_lengths()[idx]
    wf = lengths[..., None] * qf.weights[None, None, :]
    a = mesh.vertices[mesh.facets[facets, 0]]
    b = mesh.vertices[mesh.facets[facets, 1]]
    xf = a[:, :, None, :] + t[None, None, :, None] * (b - a)[:, :, None, :]

    data = ElementData(
        det=det, jinv_t=jinv_t, xq=xq, wq=wq, phi=phi, dphi=dphi, q=q,
        xf=xf, wf=wf, phi_f=phi_f, dn_phi_f=dn_phi_f,
        psi_u=eval_basis_facet(k, t, layout.velocity_trace.node_kind),
        psi_p=eval_basis_facet(k, t, layout.pressure_trace.node_kind),
        normals=normals, h=mesh.h[idx],
    )
    if elements is None:
        mesh._cache[cache_key] = data
    return data


def _kron_i2(s: np.ndarray) -> np.ndarray:
    """Block-diagonal ``diag(s, s)`` for stacked square blocks."""
    E, n, _ = s.shape
    out = np.zeros((E, 2 * n, 2 * n))
    out[:, :n, :n] = s
    out[:, n:, n:] = s
    return out


# ---------------------------------------------------------------------------
# local blocks


def assemble_local_a(layout: DofLayout, cfg: AssemblyConfig, elements=None):
    """Element blocks ``(A_uu, A_ubu, A_ubub)`` of the viscous form.

    Includes the volume term, the ``alpha / h_K`` penalty on the jump between
    element and trace velocity and both symmetric consistency terms.
    """
    d = element_data(layout, elements)
    alpha = cfg.resolve_alpha(layout)
    E = len(d.det)
    nb = d.phi.shape[-1]
    nf = layout.k + 1
    pen = alpha / d.h

    lap = np.einsum("eq,eqid,eqjd->eij", d.wq, d.dphi, d.dphi)
    s1 = pen[:, None, None] * np.einsum("efq,efqi,efqj->eij", d.wf, d.phi_f, d.phi_f)
    s2 = np.einsum("efq,efqi,efqj->eij", d.wf, d.phi_f, d.dn_phi_f)
    auu = _kron_i2(lap + s1 - s2 - np.swapaxes(s2, 1, 2))

    # a_h((phi, 0), (0, psi)) = -<alpha/h phi, psi> + <d_n phi, psi>
    t = np.einsum("efq,qm,efqi->efmi", d.wf, d.psi_u,
                  -pen[:, None, None, None] * d.phi_f + d.dn_phi_f)
    aubu = np.zeros((E, 3, 2, nf, 2, nb))
    aubu[:, :, 0, :, 0, :] = t
    aubu[:, :, 1, :, 1, :] = t
    aubu = aubu.reshape(E, 6 * nf, 2 * nb)

    mf = pen[:, None, None, None] * np.einsum("efq,qm,qn->efmn", d.wf, d.psi_u, d.psi_u)
    aubub = np.zeros((E, 3, 2, nf, 3, 2, nf))
    for f in range(3):
        for c in range(2):
            aubub[:, f, c, :, f, c, :] = mf[:, f]
    aubub = aubub.reshape(E, 6 * nf, 6 * nf)
    return auu, aubu, aubub


def assemble_local_b(layout: DofLayout, elements=None):
    """Element blocks ``(B_pu, B_pbu)`` of the pressure-velocity coupling."""
    d = element_data(layout, elements)
    E = len(d.det)
    nb = d.phi.shape[-1]
    nf = layout.k + 1
    bpu = -np.einsum("eq,eqr,eqic->erci", d.wq, d.q, d.dphi).reshape(E, -1, 2 * nb)
    bpbu = np.einsum("efq,qm,efqi,efc->efmci", d.wf, d.psi_p, d.phi_f, d.normals)
    return bpu, bpbu.reshape(E, 3 * nf, 2 * nb)


def assemble_local_mass(layout: DofLayout, elements=None):
    """Element pressure mass ``M^K`` and h_K-weighted trace pressure mass."""
    d = element_data(layout, elements)
    E = len(d.det)
    nf = layout.k + 1
    m = np.einsum("eq,eqr,eqs->ers", d.wq, d.q, d.q)
    mf = d.h[:, None, None, None] * np.einsum("efq,qm,qn->efmn", d.wf, d.psi_p, d.psi_p)
    mbar = np.zeros((E, 3, nf, 3, nf))
    for f in range(3):
        mbar[:, f, :, f, :] = mf[:, f]
    return m, mbar.reshape(E, 3 * nf, 3 * nf)


def assemble_graddiv(bpu: np.ndarray, m: np.ndarray, gamma: float) -> np.ndarray:
    """Stacked ``gamma B_pu^T M^{-1} B_pu`` (the element grad-div matrices)."""
    if gamma == 0.0:
        return np.zeros((bpu.shape[0], bpu.shape[2], bpu.shape[2]))
    return gamma * np.einsum("eri,erj->eij", bpu, np.linalg.solve(m, bpu))


def element_load(layout: DofLayout, f: Optional[Callable], elements=None) -> np.ndarray:
    """``(v_h, f)_K`` for every element velocity basis function."""
    d = element_data(layout, elements)
    E = len(d.det)
    if f is None:
        return np.zeros((E, 2 * d.phi.shape[-1]))
    fx = np.asarray(f(d.xq[..., 0], d.xq[..., 1]), dtype=float)  # (2, E, nq)
    fx = np.broadcast_to(fx, (2,) + d.wq.shape)
    return np.einsum("eq,ceq,eqi->eci", d.wq, fx, d.phi).reshape(E, -1)


def dirichlet_values(layout: DofLayout, g: Optional[Callable]) -> np.ndarray:
    """Trace-velocity vector (``all`` numbering) holding nodal values of ``g``.

    Only Dirichlet DOFs are filled; free entries are zero.
    """
    out = np.zeros(layout.n_ubar_all)
    if g is None:
        return out
    xy = layout.velocity_trace.node_xy
    bnd = np.flatnonzero(layout.velocity_trace.boundary_node)
    vals = np.asarray(g(xy[bnd, 0], xy[bnd, 1]), dtype=float)
    vals = np.broadcast_to(vals, (2, len(bnd)))
    out[2 * bnd] = vals[0]
    out[2 * bnd + 1] = vals[1]
    return out


def boundary_flux_load(layout: DofLayout, ubar_bc: np.ndarray) -> np.ndarray:
    """``<g . n, qbar>`` on boundary facets, per element in trace-local order.

    With nonzero Dirichlet data this is the right-hand side of the trace
    pressure equation that keeps the scheme consistent; it vanishes when
    ``g . n = 0`` on the boundary.
    """
    mesh = layout.mesh
    d = element_data(layout)
    nf = layout.k + 1
    E = mesh.n_elements
    on_bnd = np.isin(mesh.element_facets, mesh.boundary_facets)  # (E, 3)
    if not on_bnd.any() or not ubar_bc.any():
        return np.zeros((E, 3 * nf))
    loc = ubar_bc[layout.ubar_gather_all].reshape(E, 3, 2, nf)
    gq = np.einsum("efcm,qm->efcq", loc, d.psi_u)
    gn = np.einsum("efcq,efc->efq", gq, d.normals) * on_bnd[..., None]
    return np.einsum("efq,qm,efq->efm", d.wf, d.psi_p, gn).reshape(E, -1)


@dataclass(frozen=True, eq=False)
class LocalBlocks:
    layout: DofLayout
    cfg: AssemblyConfig
    auu: np.ndarray
    aubu: np.ndarray
    aubub: np.ndarray
    bpu: np.ndarray
    bpbu: np.ndarray
    m: np.ndarray
    mbar: np.ndarray
    load: np.ndarray  # (E, n_u_loc) element load L_u
    ubar_bc: np.ndarray  # (n_ubar_all,) Dirichlet trace values
    pbar_load: np.ndarray  # (E, n_pbar_loc) boundary flux <g.n, qbar>

    @property
    def mesh(self):
        return self.layout.mesh

    @property
    def alpha(self) -> float:
        return self.cfg.resolve_alpha(self.layout)


def assemble_blocks(layout: DofLayout, cfg: AssemblyConfig = AssemblyConfig(),
                    f: Optional[Callable] = None, g: Optional[Callable] = None) -> LocalBlocks:
    """All element blocks plus load and Dirichlet data.

    ``f(x, y)`` returns the body force as a pair of arrays and ``g(x, y)`` the
    boundary velocity; either may be ``None`` for zero data.
    """
    auu, aubu, aubub = assemble_local_a(layout, cfg)
    bpu, bpbu = assemble_local_b(layout)
    m, mbar = assemble_local_mass(layout)
    ubar_bc = dirichlet_values(layout, g)
    return LocalBlocks(layout, cfg, auu, aubu, aubub, bpu, bpbu, m, mbar,
                       element_load(layout, f), ubar_bc, boundary_flux_load(layout, ubar_bc))


# ---------------------------------------------------------------------------
# global assembly


def scatter(local: np.ndarray, rows: np.ndarray, cols: np.ndarray, shape) -> sp.csr_matrix:
    """Sum stacked dense blocks into a sparse matrix, skipping negative ids."""
    E, r, c = local.shape
    R = np.broadcast_to(rows[:, :, None], (E, r, c)).ravel()
    C = np.broadcast_to(cols[:, None, :], (E, r, c)).ravel()
    V = local.ravel()
    keep = (R >= 0) & (C >= 0)
    return sp.csr_matrix((V[keep], (R[keep], C[keep])), shape=shape)


def scatter_vector(local: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    keep = rows >= 0
    return np.bincount(rows[keep], weights=local[keep], minlength=n)


def block_diagonal(blocks: np.ndarray) -> sp.csr_matrix:
    E, r, c = blocks.shape
    rows = np.arange(E * r).reshape(E, r)
    cols = np.arange(E * c).reshape(E, c)
    return scatter(blocks, rows, cols, (E * r, E * c))


@dataclass(frozen=True, eq=False)
class GlobalMatrices:
    """Globally assembled sparse blocks (trace velocity in ``all`` numbering)."""

    auu: sp.csr_matrix
    aubu: sp.csr_matrix
    aubub: sp.csr_matrix
    bpu: sp.csr_matrix
    bpbu: sp.csr_matrix
    m: sp.csr_matrix
    mbar: sp.csr_matrix
    load: np.ndarray


def assemble_global(blocks: LocalBlocks) -> GlobalMatrices:
    L = blocks.layout
    return GlobalMatrices(
        auu=block_diagonal(blocks.auu),
        aubu=scatter(blocks.aubu, L.ubar_gather_all, L.u_gather, (L.n_ubar_all, L.n_u)),
        aubub=scatter(blocks.aubub, L.ubar_gather_all, L.ubar_gather_all, (L.n_ubar_all, L.n_ubar_all)),
        bpu=block_diagonal(blocks.bpu),
        bpbu=scatter(blocks.bpbu, L.pbar_gather, L.u_gather, (L.n_pbar, L.n_u)),
        m=block_diagonal(blocks.m),
        mbar=scatter(blocks.mbar, L.pbar_gather, L.pbar_gather, (L.n_pbar, L.n_pbar)),
        load=blocks.load.ravel(),
    )


def assemble_mass(blocks: LocalBlocks):
    """Element pressure mass ``M`` (block diagonal) and trace pressure mass ``Mbar``."""
    L = blocks.layout
    return (block_diagonal(blocks.m),
            scatter(blocks.mbar, L.pbar_gather, L.pbar_gather, (L.n_pbar, L.n_pbar)))


def constant_pressure(layout: DofLayout) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients ``(p, pbar)`` of the pressure pair equal to 1 everywhere."""
    d = element_data(layout)
    # element pressure basis is L2-orthonormal: coefficient = (1, q_r)_K
    p = np.einsum("eq,eqr->er", d.wq, d.q).ravel()
    return p, np.ones(layout.n_pbar)


@dataclass(frozen=True, eq=False)
class FullSystem:
    """The uncondensed saddle-point system on ``(u, ubar_free, p, pbar)``."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    null_vector: np.ndarray
    sizes: tuple[int, int, int, int]

    def split(self, x):
        o = np.cumsum((0,) + self.sizes)
        return tuple(x[o[i]:o[i + 1]] for i in range(4))


def assemble_full_system(blocks: LocalBlocks) -> FullSystem:
    """Full block system with Dirichlet trace DOFs lifted to the right-hand side."""
    L = blocks.layout
    G = assemble_global(blocks)
    free = L.free_ubar
    dirichlet = L.dirichlet_ubar
    gvals = blocks.ubar_bc[dirichlet]
    aubu = G.aubu[free]
    aubub = G.aubub[free][:, free]
    K = sp.bmat([
        [G.auu, aubu.T, G.bpu.T, G.bpbu.T],
        [aubu, aubub, None, None],
        [G.bpu, None, None, None],
        [G.bpbu, None, None, None],
    ], format="csr")
    rhs = np.concatenate([
        G.load - G.aubu[dirichlet].T @ gvals,
        -G.aubub[free][:, dirichlet] @ gvals,
        np.zeros(L.n_p),
        scatter_vector(blocks.pbar_load.ravel(), L.pbar_gather.ravel(), L.n_pbar),
    ])
    p1, pb1 = constant_pressure(L)
    z = np.concatenate([np.zeros(L.n_u + L.n_ubar), p1, pb1])
    return FullSystem(K, rhs, z / np.linalg.norm(z), (L.n_u, L.n_ubar, L.n_p, L.n_pbar))


# ---------------------------------------------------------------------------
# export


def export_matrix_market(directory, **arrays) -> list[Path]:
    """Write each sparse matrix / vector as ``<name>.mtx`` in ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, a in arrays.items():
        path = directory / f"{name}.mtx"
        if sp.issparse(a):
            scipy.io.mmwrite(path, a.tocoo())
        else:
            scipy.io.mmwrite(path, np.asarray(a, dtype=float).reshape(-1, 1))
        written.append(path)
    return written
