"""Quadrature, polynomial bases and degree-of-freedom layouts.

Element spaces use a monomial basis orthonormalized on the reference
triangle ``{(0,0), (1,0), (0,1)}``; trace spaces use Lagrange bases on the
unit segment, with Gauss-Legendre nodes for discontinuous traces and
Gauss-Lobatto nodes for continuous (EDG) traces so that endpoint values can
be shared between facets meeting at a vertex.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

from .mesh import Mesh


class Variant(str, Enum):
    HDG = "HDG"
    EDG = "EDG"
    EDG_HDG = "EDG-HDG"


class ConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (n, dim)
    weights: np.ndarray  # (n,)
    degree: int


@lru_cache(maxsize=None)
def segment_quadrature(degree: int) -> QuadratureRule:
    """Gauss-Legendre rule on [0, 1] exact for polynomials of ``degree``."""
    n = max(1, degree // 2 + 1)
    x, w = np.polynomial.legendre.leggauss(n)
    return QuadratureRule(0.5 * (x + 1.0)[:, None], 0.5 * w, degree)


@lru_cache(maxsize=None)
def triangle_quadrature(degree: int) -> QuadratureRule:
    """Collapsed Gauss-Jacobi rule on the reference triangle (area 1/2)."""
    n = max(1, degree // 2 + 1)
    xa, wa = np.polynomial.legendre.leggauss(n)
    xb, wb = roots_jacobi(n, 1.0, 0.0)
    a = 0.5 * (xa + 1.0)
    b = 0.5 * (xb + 1.0)
    # Duffy map: x = a (1 - b), y = b, Jacobian (1 - b); weight (1-xb) folded in roots_jacobi
    X = np.outer(1.0 - b, a)
    Y = np.repeat(b[:, None], n, axis=1)
    W = np.outer(wb, wa) * 0.125
    pts = np.column_stack([X.ravel(), Y.ravel()])
    return QuadratureRule(pts, W.ravel(), degree)


# ---------------------------------------------------------------------------
# element basis


def monomial_exponents(k: int) -> np.ndarray:
    return np.array([(d - j, j) for d in range(k + 1) for j in range(d + 1)], dtype=int)


def _monomials(k: int, pts: np.ndarray):
    e = monomial_exponents(k)
    x = pts[..., 0, None]
    y = pts[..., 1, None]
    vals = x ** e[:, 0] * y ** e[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        dx = np.where(e[:, 0] > 0, e[:, 0] * x ** np.maximum(e[:, 0] - 1, 0), 0.0) * y ** e[:, 1]
        dy = x ** e[:, 0] * np.where(e[:, 1] > 0, e[:, 1] * y ** np.maximum(e[:, 1] - 1, 0), 0.0)
    return vals, np.stack([dx, dy], axis=-1)


@lru_cache(maxsize=None)
def _orthonormal_coefficients(k: int) -> np.ndarray:
    q = triangle_quadrature(2 * k)
    V, _ = _monomials(k, q.points)
    G = V.T @ (q.weights[:, None] * V)
    L = np.linalg.cholesky(G)
    C = np.linalg.inv(L).T
    C.setflags(write=False)
    return C


def dim_pk(k: int) -> int:
    return (k + 1) * (k + 2) // 2


def eval_basis_element(k: int, points) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal P_k basis on the reference triangle.

    Parameters
    ----------
    k : int
        Polynomial degree, ``k >= 0``.
    points : array_like, shape (..., 2)
        Reference coordinates.

    Returns
    -------
    values : (..., dim P_k)
    grads : (..., dim P_k, 2)
    """
    if k < 0:
        raise ConfigurationError("polynomial degree must be nonnegative")
    pts = np.asarray(points, dtype=float)
    V, D = _monomials(k, pts)
    C = _orthonormal_coefficients(k)
    return V @ C, np.einsum("...md,mi->...id", D, C)


# ---------------------------------------------------------------------------
# facet basis


@lru_cache(maxsize=None)
def facet_nodes(k: int, kind: str = "gauss") -> np.ndarray:
    """Lagrange nodes on [0, 1]: ``gauss`` (interior) or ``lobatto`` (with endpoints)."""
    if kind == "gauss":
        x, _ = np.polynomial.legendre.leggauss(k + 1)
    elif kind == "lobatto":
        if k == 0:
            raise ConfigurationError("continuous traces need k >= 1")
        # interior Lobatto nodes are the roots of P_k'
        inner = np.polynomial.legendre.Legendre.basis(k).deriv().roots() if k > 1 else np.empty(0)
        x = np.concatenate([[-1.0], np.sort(inner.real), [1.0]])
    else:
        raise ConfigurationError(f"unknown node family {kind!r}")
    t = 0.5 * (x + 1.0)
    t.setflags(write=False)
    return t


def eval_basis_facet(k: int, t, kind: str = "gauss") -> np.ndarray:
    """Lagrange basis of P_k on the unit segment evaluated at ``t``.

    Returns an array of shape ``t.shape + (k + 1,)``.
    """
    if k < 0:
        raise ConfigurationError("polynomial degree must be nonnegative")
    t = np.asarray(t, dtype=float)
    if k == 0:
        return np.ones(t.shape + (1,))
    nodes = facet_nodes(k, kind)
    out = np.ones(t.shape + (k + 1,))
    for i, xi in enumerate(nodes):
        for j, xj in enumerate(nodes):
            if i != j:
                out[..., i] *= (t - xj) / (xi - xj)
    return out


# ---------------------------------------------------------------------------
# spaces and DOF layouts


@dataclass(frozen=True)
class SpaceConfig:
    k: int = 2
    variant: Variant = Variant.HDG

    def __post_init__(self):
        try:
            object.__setattr__(self, "variant", Variant(self.variant))
        except ValueError as exc:
            raise ConfigurationError(f"unsupported variant {self.variant!r}") from exc
        if self.k < 1:
            raise ConfigurationError("element velocity degree k must be >= 1")

    @property
    def velocity_continuous(self) -> bool:
        return self.variant in (Variant.EDG, Variant.EDG_HDG)

    @property
    def pressure_continuous(self) -> bool:
        return self.variant is Variant.EDG


@dataclass(frozen=True, eq=False)
class TraceSpace:
    """Scalar trace space on the skeleton: facet node -> global node id."""

    continuous: bool
    node_kind: str
    nodes_per_facet: int
    facet_nodes: np.ndarray  # (F, k+1) global node ids
    n_nodes: int
    node_xy: np.ndarray  # (n_nodes, 2)
    boundary_node: np.ndarray  # (n_nodes,) bool


def _trace_space(mesh: Mesh, k: int, continuous: bool) -> TraceSpace:
    kind = "lobatto" if continuous else "gauss"
    t = facet_nodes(k, kind)
    F, V = mesh.n_facets, mesh.n_vertices
    nf = k + 1
    if continuous:
        ids = np.empty((F, nf), dtype=np.int64)
        ids[:, 0] = mesh.facets[:, 0]
        ids[:, -1] = mesh.facets[:, 1]
        ids[:, 1:-1] = V + np.arange(F)[:, None] * (k - 1) + np.arange(k - 1)
        n = V + F * (k - 1)
    else:
        ids = np.arange(F * nf, dtype=np.int64).reshape(F, nf)
        n = F * nf
    a = mesh.vertices[mesh.facets[:, 0]]
    b = mesh.vertices[mesh.facets[:, 1]]
    xy = np.empty((n, 2))
    xy[ids] = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    bnd = np.zeros(n, dtype=bool)
    bnd[ids[mesh.boundary_facets]] = True
    for arr in (ids, xy, bnd):
        arr.setflags(write=False)
    return TraceSpace(continuous, kind, nf, ids, n, xy, bnd)


@dataclass(frozen=True, eq=False)
class DofLayout:
    """Global numbering of the four spaces.

    Trace-velocity DOFs exist in two numberings: ``all`` (including Dirichlet
    DOFs, id ``2 * node + component``) and ``free`` (Dirichlet DOFs removed).
    Local trace orderings on an element are facet-major: velocity
    ``(facet, component, node)``, pressure ``(facet, node)``.
    """

    mesh: Mesh
    cfg: SpaceConfig
    velocity_trace: TraceSpace
    pressure_trace: TraceSpace
    n_u: int
    n_p: int
    n_ubar_all: int
    n_ubar: int
    n_pbar: int
    ubar_free_index: np.ndarray  # (n_ubar_all,) free id or -1
    ubar_dirichlet: np.ndarray  # (n_ubar_all,) bool
    ubar_gather_all: np.ndarray  # (E, 6(k+1))
    ubar_gather: np.ndarray  # (E, 6(k+1)) free id or -1
    pbar_gather: np.ndarray  # (E, 3(k+1))
    u_gather: np.ndarray  # (E, 2 dim P_k)
    p_gather: np.ndarray  # (E, dim P_{k-1})

    @property
    def k(self) -> int:
        return self.cfg.k

    @property
    def n_two_field(self) -> int:
        return self.n_ubar + self.n_pbar

    @property
    def n_three_field(self) -> int:
        return self.n_ubar + self.n_p + self.n_pbar

    @property
    def n_two_field_with_dirichlet(self) -> int:
        """Two-field size when Dirichlet trace DOFs are counted as unknowns."""
        return self.n_ubar_all + self.n_pbar

    @property
    def n_three_field_with_dirichlet(self) -> int:
        return self.n_ubar_all + self.n_p + self.n_pbar

    @property
    def free_ubar(self) -> np.ndarray:
        return np.flatnonzero(~self.ubar_dirichlet)

    @property
    def dirichlet_ubar(self) -> np.ndarray:
        return np.flatnonzero(self.ubar_dirichlet)

    def ubar_dof_xy(self) -> np.ndarray:
        """Coordinates of every trace-velocity DOF in ``all`` numbering."""
        return np.repeat(self.velocity_trace.node_xy, 2, axis=0)

    def ubar_dof_component(self) -> np.ndarray:
        return np.tile([0, 1], self.velocity_trace.n_nodes)


def build_layout(mesh: Mesh, cfg: SpaceConfig) -> DofLayout:
    if not isinstance(cfg, SpaceConfig):
        raise ConfigurationError("cfg must be a SpaceConfig")
    k = cfg.k
    E = mesh.n_elements
    vt = _trace_space(mesh, k, cfg.velocity_continuous)
    pt = _trace_space(mesh, k, cfg.pressure_continuous)

    nb = dim_pk(k)
    nbp = dim_pk(k - 1)
    n_u = 2 * nb * E
    n_p = nbp * E

    n_ubar_all = 2 * vt.n_nodes
    dirichlet = np.repeat(vt.boundary_node, 2)
    free_index = np.full(n_ubar_all, -1, dtype=np.int64)
    free_index[~dirichlet] = np.arange(np.count_nonzero(~dirichlet))

    ef = mesh.element_facets
    vnodes = vt.facet_nodes[ef]  # (E, 3, nf)
    comp = np.arange(2)
    ubar_all = (2 * vnodes[:, :, None, :] + comp[None, None, :, None]).reshape(E, -1)
    pbar = pt.facet_nodes[ef].reshape(E, -1)

    layout = DofLayout(
        mesh=mesh, cfg=cfg, velocity_trace=vt, pressure_trace=pt,
        n_u=n_u, n_p=n_p, n_ubar_all=n_ubar_all,
        n_ubar=int(np.count_nonzero(~dirichlet)), n_pbar=pt.n_nodes,
        ubar_free_index=free_index, ubar_dirichlet=dirichlet,
        ubar_gather_all=ubar_all, ubar_gather=free_index[ubar_all], pbar_gather=pbar,
        u_gather=np.arange(n_u).reshape(E, 2 * nb),
        p_gather=np.arange(n_p).reshape(E, nbp),
    )
    for arr in (free_index, dirichlet, ubar_all, layout.ubar_gather, pbar):
        arr.setflags(write=False)
    return layout
