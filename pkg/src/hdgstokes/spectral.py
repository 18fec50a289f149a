"""Dense, size-capped spectral diagnostics and the mesh-dependent norms.

These are verification tools for the spectral equivalences behind the block
preconditioners; nothing here is meant for large problems.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sl
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .assembly import (AssemblyConfig, assemble_blocks, block_diagonal, element_data,
                       scatter)
from .condensation import CondensedSystem, LocalCondensed, SystemKind, build_local_projector
from .fespace import DofLayout
from .krylov import build_agamma, build_bab, build_mbar

MAX_DENSE = 2000
FULL_SPECTRUM_MAX = 500


class SizeCapError(ValueError):
    """Dense work requested on a problem above the size cap."""


class IndefiniteError(ValueError):
    """The second matrix of a generalized pair is not SPD on the subspace."""


def _dense(a) -> np.ndarray:
    return a.toarray() if sp.issparse(a) else np.asarray(a, dtype=float)


def _check_cap(n: int, cap: int):
    if n > cap:
        raise SizeCapError(f"dense work on n={n} exceeds cap {cap}; use a coarser mesh "
                           "or raise the cap explicitly")


# ---------------------------------------------------------------------------
# trace pressure Schur complement


def build_schur_sbar(system: CondensedSystem, route: str = "formula",
                     max_size: int = MAX_DENSE) -> np.ndarray:
    """Dense trace pressure Schur complement ``Sbar`` of a two-field system.

    ``route="formula"`` evaluates
    ``B_pbu P (A_uu^-1 + A_uu^-1 A_ubu^T (Abar^d)^-1 A_ubu A_uu^-1) P^T B_pbu^T``
    from global block-diagonal ``P`` and ``A_uu^-1``; ``route="elimination"``
    eliminates ``ubar`` from the assembled two-field matrix.
    """
    if system.kind is not SystemKind.TWO_FIELD:
        raise ValueError("Sbar is defined for the two-field system")
    n_ub, n_pb = system.sizes
    _check_cap(n_pb, max_size)
    if route == "elimination":
        kup = system.block(0, 1).toarray()
        kpp = system.block(1, 1).toarray()
        s = -kpp + kup.T @ sla.splu(system.block(0, 0).tocsc()).solve(kup)
    elif route == "formula":
        ad = system.block(0, 0).toarray()
        local = system.local
        b = local.blocks
        L = b.layout
        P = block_diagonal(local.proj).toarray()
        Ainv = block_diagonal(local.auu_inv).toarray()
        aubu = scatter(b.aubu, L.ubar_gather_all, L.u_gather,
                       (L.n_ubar_all, L.n_u))[L.free_ubar].toarray()
        bpbu = scatter(b.bpbu, L.pbar_gather, L.u_gather, (L.n_pbar, L.n_u)).toarray()
        inner = Ainv + Ainv @ aubu.T @ np.linalg.solve(ad, aubu @ Ainv)
        left = bpbu @ P
        s = left @ inner @ left.T
    else:
        raise ValueError("route must be 'formula' or 'elimination'")
    return 0.5 * (s + s.T)


# ---------------------------------------------------------------------------
# generalized eigenvalues


@dataclass
class SpectrumReport:
    """Extremes of a generalized eigenproblem on the deflated subspace.

    For indefinite first matrices the negative and positive intervals are
    recorded separately (``None`` when empty).
    """

    pair: str
    n: int
    lambda_min: float
    lambda_max: float
    negative_interval: Optional[tuple] = None
    positive_interval: Optional[tuple] = None
    level: Optional[int] = None
    elements: Optional[int] = None
    spectrum: Optional[list] = field(default=None, repr=False)

    @property
    def min_abs(self) -> float:
        vals = [abs(v) for iv in (self.negative_interval, self.positive_interval)
                if iv is not None for v in iv]
        return min(vals)

    def row(self) -> dict:
        neg = self.negative_interval or (np.nan, np.nan)
        pos = self.positive_interval or (np.nan, np.nan)
        return dict(pair=self.pair, level=self.level, elements=self.elements, n=self.n,
                    lambda_min=self.lambda_min, lambda_max=self.lambda_max,
                    neg_lo=neg[0], neg_hi=neg[1], pos_lo=pos[0], pos_hi=pos[1])

    def to_json(self, path=None) -> str:
        d = asdict(self)
        text = json.dumps(d, indent=2, default=float)
        if path is not None:
            Path(path).write_text(text)
        return text


def write_spectrum_csv(reports: Sequence[SpectrumReport], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [r.row() for r in reports]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path


def complement_basis(null_vector, n: int) -> np.ndarray:
    """Orthonormal basis of the Euclidean complement of ``null_vector``."""
    if null_vector is None:
        return np.eye(n)
    z = np.asarray(null_vector, dtype=float).reshape(n, -1)
    return sl.null_space(z.T)


def generalized_extremes(a, b, deflation=None, pair: str = "", level=None, elements=None,
                         max_size: int = MAX_DENSE,
                         full_spectrum_max: int = FULL_SPECTRUM_MAX) -> SpectrumReport:
    """Eigenvalues of ``a x = lambda b x`` restricted to the complement of ``deflation``.

    Raises
    ------
    IndefiniteError
        If ``b`` is not positive definite on the subspace.
    """
    A = _dense(a)
    B = _dense(b)
    n = A.shape[0]
    _check_cap(n, max_size)
    Q = complement_basis(deflation, n)
    Ar = Q.T @ A @ Q
    Br = Q.T @ B @ Q
    Ar = 0.5 * (Ar + Ar.T)
    Br = 0.5 * (Br + Br.T)
    try:
        np.linalg.cholesky(Br)
    except np.linalg.LinAlgError as exc:
        raise IndefiniteError("second matrix is not SPD on the deflated subspace") from exc
    w = sl.eigh(Ar, Br, eigvals_only=True)
    neg = w[w < 0]
    pos = w[w > 0]
    return SpectrumReport(
        pair=pair, n=len(w), lambda_min=float(w[0]), lambda_max=float(w[-1]),
        negative_interval=(float(neg[0]), float(neg[-1])) if neg.size else None,
        positive_interval=(float(pos[0]), float(pos[-1])) if pos.size else None,
        level=level, elements=elements,
        spectrum=w.tolist() if len(w) <= full_spectrum_max else None,
    )


def preconditioner_matrix(system: CondensedSystem, family: str = "PM") -> sp.csr_matrix:
    """Exact block-diagonal preconditioner ``blockdiag(Abar^d, Mbar | BAB)`` as a matrix."""
    if system.kind is not SystemKind.TWO_FIELD:
        raise ValueError("two-field system expected")
    local = system.local
    second = build_mbar(local) if family == "PM" else build_bab(local)
    return sp.block_diag([system.block(0, 0), second], format="csr")


def preconditioned_spectrum(system: CondensedSystem, family: str = "PM", **kw) -> SpectrumReport:
    """Spectrum of the exactly preconditioned two-field operator (deflated)."""
    P = preconditioner_matrix(system, family)
    return generalized_extremes(system.matrix, P, system.null_vector,
                                pair=f"two-field/{family}", **kw)


def schur_pairs(system: CondensedSystem, level=None, **kw) -> list[SpectrumReport]:
    """``(Sbar, Mbar)`` and ``(Sbar, BAB)`` extremes on the complement of constants."""
    S = build_schur_sbar(system, route="elimination", max_size=kw.get("max_size", MAX_DENSE))
    ones = np.ones(S.shape[0])
    E = system.local.blocks.layout.mesh.n_elements
    return [generalized_extremes(S, build_mbar(system.local), ones, "Sbar/Mbar", level, E, **kw),
            generalized_extremes(S, build_bab(system.local), ones, "Sbar/BAB", level, E, **kw)]


def relative_drift(values: Sequence[float]) -> float:
    """``max / min - 1`` of positive magnitudes; 0 for a constant sequence."""
    v = np.abs(np.asarray(values, dtype=float))
    return float(v.max() / v.min() - 1.0)


# ---------------------------------------------------------------------------
# discrete norms

NORMS = ("facet_L2", "facet_H1", "velocity_stability", "trace_pressure", "full_pressure")


def _ubar_all(layout: DofLayout, ubar) -> np.ndarray:
    ubar = np.asarray(ubar, dtype=float)
    if ubar.size == layout.n_ubar_all:
        return ubar
    if ubar.size == layout.n_ubar:
        out = np.zeros(layout.n_ubar_all)
        out[layout.free_ubar] = ubar
        return out
    raise ValueError(f"trace velocity has {ubar.size} entries; layout expects "
                     f"{layout.n_ubar} (free) or {layout.n_ubar_all} (all)")


def _check(name, arr, n):
    if arr is None:
        raise ValueError(f"{name} is required for this norm")
    arr = np.asarray(arr, dtype=float)
    if arr.size != n:
        raise ValueError(f"{name} has {arr.size} entries; layout expects {n}")
    return arr


def trace_velocity_at_facets(layout: DofLayout, ubar) -> np.ndarray:
    """Trace velocity at facet quadrature points, shape ``(E, 3, 2, nqf)``."""
    d = element_data(layout)
    nf = layout.k + 1
    loc = _ubar_all(layout, ubar)[layout.ubar_gather_all].reshape(-1, 3, 2, nf)
    return np.einsum("efcm,qm->efcq", loc, d.psi_u)


def discrete_norms(layout: DofLayout, which: str, *, ubar=None, u=None, pbar=None, p=None,
                   alpha: Optional[float] = None) -> float:
    """Mesh-dependent norms of discrete fields.

    ``facet_L2``: ``sum_K h_K ||ubar||^2_dK``;
    ``facet_H1``: ``sum_K h_K^-1 ||ubar - m_K(ubar)||^2_dK`` with the boundary mean ``m_K``;
    ``velocity_stability``: ``sum_K ||grad u||^2_K + alpha h_K^-1 ||ubar - u||^2_dK``;
    ``trace_pressure``: ``sum_K h_K ||pbar||^2_dK``;
    ``full_pressure``: ``||p||^2 + trace_pressure``.
    The square root is returned.
    """
    if which not in NORMS:
        raise ValueError(f"unknown norm {which!r}; choose from {NORMS}")
    d = element_data(layout)
    E = layout.mesh.n_elements
    h = d.h
    if which in ("facet_L2", "facet_H1", "velocity_stability"):
        if ubar is None:
            raise ValueError("ubar is required for this norm")
        vals = trace_velocity_at_facets(layout, ubar)  # (E,3,2,q)
        if which == "facet_L2":
            s = np.einsum("e,efq,efcq->", h, d.wf, vals ** 2)
        elif which == "facet_H1":
            perim = d.wf.sum(axis=(1, 2))
            mean = np.einsum("efq,efcq->ec", d.wf, vals) / perim[:, None]
            dev = vals - mean[:, None, :, None]
            s = np.einsum("e,efq,efcq->", 1.0 / h, d.wf, dev ** 2)
        else:
            uu = _check("u", u, layout.n_u).reshape(E, 2, -1)
            if alpha is None:
                alpha = AssemblyConfig().resolve_alpha(layout)
            grad = np.einsum("ecb,eqbi->eqci", uu, d.dphi)
            s = np.einsum("eq,eqci->", d.wq, grad ** 2)
            uf = np.einsum("ecb,efqb->efcq", uu, d.phi_f)
            s += np.einsum("e,efq,efcq->", alpha / h, d.wf, (vals - uf) ** 2)
        return float(np.sqrt(s))
    pb = _check("pbar", pbar, layout.n_pbar)
    nf = layout.k + 1
    loc = pb[layout.pbar_gather].reshape(E, 3, nf)
    vals = np.einsum("efm,qm->efq", loc, d.psi_p)
    s = np.einsum("e,efq,efq->", h, d.wf, vals ** 2)
    if which == "full_pressure":
        pp = _check("p", p, layout.n_p).reshape(E, -1)
        ph = np.einsum("eb,eqb->eq", pp, d.q)
        s += np.einsum("eq,eq->", d.wq, ph ** 2)
    return float(np.sqrt(s))


def facet_norm_matrix(layout: DofLayout, which: str) -> sp.csr_matrix:
    """Gram matrix of ``facet_L2`` or ``facet_H1`` on the free trace velocity DOFs."""
    d = element_data(layout)
    nf = layout.k + 1
    mloc = np.einsum("efq,qm,qn->efmn", d.wf, d.psi_u, d.psi_u)  # (E,3,nf,nf)
    E = mloc.shape[0]
    full = np.zeros((E, 3, nf, 3, nf))
    for f in range(3):
        full[:, f, :, f, :] = mloc[:, f]
    full = full.reshape(E, 3 * nf, 3 * nf)
    if which == "facet_L2":
        loc = d.h[:, None, None] * full
    elif which == "facet_H1":
        mean = np.einsum("efq,qm->efm", d.wf, d.psi_u).reshape(E, 3 * nf)
        perim = d.wf.sum(axis=(1, 2))
        loc = (full - mean[:, :, None] * mean[:, None, :] / perim[:, None, None]) / d.h[:, None, None]
    else:
        raise ValueError("which must be 'facet_L2' or 'facet_H1'")
    # scalar form acts on each component; local order is (facet, component, node)
    vec = np.zeros((E, 3, 2, nf, 3, 2, nf))
    loc = loc.reshape(E, 3, nf, 3, nf)
    for c in range(2):
        vec[:, :, c, :, :, c, :] = loc
    vec = vec.reshape(E, 6 * nf, 6 * nf)
    g = layout.ubar_gather_all
    K = scatter(vec, g, g, (layout.n_ubar_all, layout.n_ubar_all))
    f = layout.free_ubar
    return K[f][:, f].tocsr()


def poincare_constant(layout: DofLayout) -> float:
    """Best constant ``c`` in ``facet_L2 <= c facet_H1`` on the free trace DOFs."""
    L2 = facet_norm_matrix(layout, "facet_L2")
    H1 = facet_norm_matrix(layout, "facet_H1")
    lam = sla.eigsh(L2, k=1, M=H1.tocsc(), which="LA", return_eigenvectors=False)
    return float(np.sqrt(lam[0]))


# ---------------------------------------------------------------------------
# Abar_gamma versus Abar


def agamma_extremes(local: LocalCondensed, gamma: float, level=None,
                    max_size: int = MAX_DENSE) -> SpectrumReport:
    """Rayleigh-quotient extremes of ``x^T Abar_gamma x / x^T Abar x``."""
    A0 = build_agamma(local, 0.0)
    Ag = build_agamma(local, gamma)
    return generalized_extremes(Ag, A0, None, f"Agamma({gamma:g})/Abar", level,
                                local.blocks.layout.mesh.n_elements, max_size=max_size)


def verify_h1_equivalence_agamma(meshes, gamma: float, cfg=None,
                                 max_size: int = MAX_DENSE) -> list[SpectrumReport]:
    """Per-mesh extremes of ``(Abar_gamma, Abar)`` for a sequence of meshes.

    ``cfg`` is a :class:`fespace.SpaceConfig` (HDG, k=2 by default).
    """
    from .fespace import SpaceConfig, build_layout

    cfg = cfg or SpaceConfig()
    out = []
    for level, m in enumerate(meshes):
        layout = build_layout(m, cfg)
        local = build_local_projector(assemble_blocks(layout))
        out.append(agamma_extremes(local, gamma, level, max_size))
    return out
