"""Two-dimensional simplicial meshes with full edge (facet) topology.

Local facet ``j`` of an element is the edge from local vertex ``j`` to local
vertex ``(j + 1) % 3``. Global facets are stored with their vertex pair sorted
(``a < b``); trace functions on a facet are parametrized from ``a`` to ``b``
so that both neighbouring elements see the same parametrization.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay

BOUNDARY = -1
DEFAULT_BOUNDARY_TAG = 1

# generate_unstructured keeps max(h_K) <= GENERATOR_H_FACTOR * target_h
GENERATOR_H_FACTOR = 2.0


class MeshError(ValueError):
    """Raised for invalid mesh input."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable conforming triangulation.

    Attributes
    ----------
    vertices : (V, 2) float array
    elements : (E, 3) int array, counter-clockwise
    facets : (F, 2) int array, sorted vertex pairs
    facet_elements : (F, 2) int array, ``(K+, K-)``; ``K-`` is ``BOUNDARY``
        on boundary facets
    facet_local : (F, 2) int array, local facet index in ``K+`` / ``K-``
    element_facets : (E, 3) int array, global facet of each local facet
    h : (E,) float array, element diameters
    boundary_tags : (F,) int array, 0 on interior facets
    """

    vertices: np.ndarray
    elements: np.ndarray
    facets: np.ndarray
    facet_elements: np.ndarray
    facet_local: np.ndarray
    element_facets: np.ndarray
    h: np.ndarray
    boundary_tags: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_facets(self) -> int:
        return len(self.facets)

    @property
    def boundary_facets(self) -> np.ndarray:
        return np.flatnonzero(self.facet_elements[:, 1] == BOUNDARY)

    @property
    def interior_facets(self) -> np.ndarray:
        return np.flatnonzero(self.facet_elements[:, 1] != BOUNDARY)

    @property
    def n_boundary_facets(self) -> int:
        return int(np.count_nonzero(self.facet_elements[:, 1] == BOUNDARY))

    @property
    def areas(self) -> np.ndarray:
        if "areas" not in self._cache:
            self._cache["areas"] = signed_areas(self.vertices, self.elements)
        return self._cache["areas"]

    @property
    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.facets[self.boundary_facets])

    def facet_lengths(self) -> np.ndarray:
        d = self.vertices[self.facets[:, 1]] - self.vertices[self.facets[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def local_normals(self) -> np.ndarray:
        """Outward unit normals, shape (E, 3, 2), per local facet."""
        if "normals" not in self._cache:
            p = self.vertices[self.elements]
            d = np.roll(p, -1, axis=1) - p
            n = np.stack([d[..., 1], -d[..., 0]], axis=-1)
            n /= np.linalg.norm(n, axis=-1, keepdims=True)
            self._cache["normals"] = n
        return self._cache["normals"]

    def local_facet_lengths(self) -> np.ndarray:
        p = self.vertices[self.elements]
        d = np.roll(p, -1, axis=1) - p
        return np.hypot(d[..., 0], d[..., 1])

    def facet_geometry(self, facet_id: int):
        """Normals, length and midpoint of one facet.

        Returns
        -------
        normals : list of (2,) arrays
            Outward unit normal of each adjacent element, ``K+`` first.
        length : float
        midpoint : (2,) array
        """
        if not 0 <= facet_id < self.n_facets:
            raise IndexError(f"facet id {facet_id} out of range [0, {self.n_facets})")
        a, b = self.vertices[self.facets[facet_id]]
        normals = []
        for side in range(2):
            K = self.facet_elements[facet_id, side]
            if K == BOUNDARY:
                continue
            normals.append(self.local_normals()[K, self.facet_local[facet_id, side]].copy())
        return normals, float(np.hypot(*(b - a))), 0.5 * (a + b)

    def check(self) -> None:
        """Raise :class:`MeshError` if a structural invariant is violated."""
        if np.any(self.areas <= 0.0):
            raise MeshError("elements must be counter-clockwise with positive area")
        E, F, B = self.n_elements, self.n_facets, self.n_boundary_facets
        if 2 * F != 3 * E + B:
            raise MeshError(f"non-conforming mesh: 2F={2 * F} != 3E+B={3 * E + B}")
        for side in range(2):
            K = self.facet_elements[:, side]
            ok = K != BOUNDARY
            if np.any(self.element_facets[K[ok], self.facet_local[ok, side]] != np.flatnonzero(ok)):
                raise MeshError("facet adjacency is not involutive")
        if np.any(self.h <= 0.0):
            raise MeshError("element sizes must be positive")


def signed_areas(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    p = vertices[elements]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def element_diameters(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    p = vertices[elements]
    d = np.roll(p, -1, axis=1) - p
    return np.hypot(d[..., 0], d[..., 1]).max(axis=1)


def from_elements(vertices, elements, boundary_tags=None) -> Mesh:
    """Build a :class:`Mesh` (topology, orientation, sizes) from connectivity.

    Clockwise elements are reoriented. ``boundary_tags`` may be a callable
    ``tag(midpoints) -> int array`` evaluated on boundary facet midpoints.
    """
    vertices = np.ascontiguousarray(vertices, dtype=float)
    elements = np.array(elements, dtype=np.int64).reshape(-1, 3)
    if vertices.ndim != 2 or vertices.shape[1] != 2:
        raise MeshError("vertices must have shape (V, 2)")
    if elements.size == 0:
        raise MeshError("mesh has no elements")
    if elements.min() < 0 or elements.max() >= len(vertices):
        raise MeshError("element connectivity references missing vertices")
    area = signed_areas(vertices, elements)
    if np.any(area == 0.0):
        raise MeshError("degenerate (zero-area) element")
    cw = area < 0
    elements[cw] = elements[cw][:, [0, 2, 1]]

    E = len(elements)
    edges = np.stack([elements, np.roll(elements, -1, axis=1)], axis=-1).reshape(-1, 2)
    edges_sorted = np.sort(edges, axis=1)
    facets, inverse, counts = np.unique(edges_sorted, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    if np.any(counts > 2):
        raise MeshError("an edge is shared by more than two elements")
    element_facets = inverse.reshape(E, 3)

    F = len(facets)
    facet_elements = np.full((F, 2), BOUNDARY, dtype=np.int64)
    facet_local = np.full((F, 2), BOUNDARY, dtype=np.int64)
    owner = np.repeat(np.arange(E), 3)
    local = np.tile(np.arange(3), E)
    order = np.argsort(inverse, kind="stable")
    inv_sorted = inverse[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = inv_sorted[1:] != inv_sorted[:-1]
    facet_elements[inv_sorted[first], 0] = owner[order][first]
    facet_local[inv_sorted[first], 0] = local[order][first]
    facet_elements[inv_sorted[~first], 1] = owner[order][~first]
    facet_local[inv_sorted[~first], 1] = local[order][~first]

    tags = np.zeros(F, dtype=np.int64)
    bnd = facet_elements[:, 1] == BOUNDARY
    if boundary_tags is None:
        tags[bnd] = DEFAULT_BOUNDARY_TAG
    elif callable(boundary_tags):
        mid = 0.5 * (vertices[facets[bnd, 0]] + vertices[facets[bnd, 1]])
        tags[bnd] = boundary_tags(mid)
    else:
        tags[:] = boundary_tags

    mesh = Mesh(
        vertices=vertices,
        elements=elements,
        facets=facets,
        facet_elements=facet_elements,
        facet_local=facet_local,
        element_facets=element_facets,
        h=element_diameters(vertices, elements),
        boundary_tags=tags,
    )
    for arr in (mesh.vertices, mesh.elements, mesh.facets, mesh.facet_elements,
                mesh.facet_local, mesh.element_facets, mesh.h, mesh.boundary_tags):
        arr.setflags(write=False)
    mesh.check()
    return mesh


def _check_domain(domain):
    (x0, x1), (y0, y1) = domain
    if not (np.isfinite([x0, x1, y0, y1]).all() and x1 > x0 and y1 > y0):
        raise MeshError(f"degenerate domain {domain!r}")
    return float(x0), float(x1), float(y0), float(y1)


def generate_unstructured(domain=((0.0, 1.0), (0.0, 1.0)), target_h: float = 0.25,
                          seed: int = 0, jitter: float = 0.25, smoothing: int = 8) -> Mesh:
    """Delaunay mesh of a jittered, row-staggered point set on a rectangle.

    Boundary points are equispaced with spacing at most ``target_h``; interior
    points sit on staggered rows (roughly equilateral spacing) and are moved
    by a seeded uniform jitter of ``jitter * target_h`` and then relaxed by
    ``smoothing`` rounds of Laplacian smoothing with re-triangulation (keeps
    the elements close to equilateral, which the penalty defaults need). The
    result satisfies
    ``max(h) <= GENERATOR_H_FACTOR * target_h`` and is deterministic in
    ``seed``.
    """
    x0, x1, y0, y1 = _check_domain(domain)
    if not target_h > 0:
        raise MeshError("target_h must be positive")
    Lx, Ly = x1 - x0, y1 - y0
    nx = max(1, int(np.ceil(Lx / target_h - 1e-12)))
    dx = Lx / nx
    rows = max(1, int(round(Ly / (dx * np.sqrt(3.0) / 2.0))))
    dy = Ly / rows
    sx = np.linspace(x0, x1, nx + 1)
    sy = y0 + dy * np.arange(1, rows)
    boundary = np.concatenate([
        np.column_stack([sx, np.full_like(sx, y0)]),
        np.column_stack([sx, np.full_like(sx, y1)]),
        np.column_stack([np.full_like(sy, x0), sy]),
        np.column_stack([np.full_like(sy, x1), sy]),
    ])

    # staggered rows: odd rows are shifted by half a spacing
    interior = []
    for j in range(1, rows):
        xs = x0 + dx * (np.arange(nx) + 0.5) if j % 2 else x0 + dx * np.arange(1, nx)
        interior.extend((x, y0 + j * dy) for x in xs)
    interior = np.array(interior, dtype=float).reshape(-1, 2)
    rng = np.random.default_rng(seed)
    if len(interior):
        interior += rng.uniform(-jitter, jitter, size=interior.shape) * min(dx, dy)

    points = np.concatenate([boundary, interior])
    nb = len(boundary)
    simplices = _delaunay(points)
    for _ in range(smoothing):
        # move interior points to the mean of their Delaunay neighbours
        edges = np.concatenate([simplices[:, [0, 1]], simplices[:, [1, 2]], simplices[:, [2, 0]]])
        edges = np.concatenate([edges, edges[:, ::-1]])
        acc = np.zeros_like(points)
        np.add.at(acc, edges[:, 0], points[edges[:, 1]])
        deg = np.bincount(edges[:, 0], minlength=len(points))
        points[nb:] = acc[nb:] / deg[nb:, None]
        simplices = _delaunay(points)
    mesh = from_elements(points, simplices)
    if not np.isclose(mesh.areas.sum(), Lx * Ly, rtol=1e-12):
        raise MeshError("generated triangulation does not cover the domain")
    return mesh


def _delaunay(points):
    simplices = Delaunay(points).simplices
    area = signed_areas(points, simplices)
    scale = np.ptp(points, axis=0).prod()
    return simplices[np.abs(area) > 1e-12 * scale]


def min_angles(mesh: Mesh) -> np.ndarray:
    """Smallest interior angle (radians) of each element."""
    p = mesh.vertices[mesh.elements]
    ang = []
    for i in range(3):
        u = p[:, (i + 1) % 3] - p[:, i]
        v = p[:, (i + 2) % 3] - p[:, i]
        c = (u * v).sum(1) / np.linalg.norm(u, axis=1) / np.linalg.norm(v, axis=1)
        ang.append(np.arccos(np.clip(c, -1, 1)))
    return np.min(ang, axis=0)


def unit_square_two_triangles() -> Mesh:
    """Square (0,1)^2 split along its diagonal from (0,0) to (1,1)."""
    v = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    return from_elements(v, [[0, 1, 2], [0, 2, 3]])


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every triangle into four similar triangles via edge midpoints."""
    V = mesh.n_vertices
    mid = 0.5 * (mesh.vertices[mesh.facets[:, 0]] + mesh.vertices[mesh.facets[:, 1]])
    vertices = np.concatenate([mesh.vertices, mid])
    m = V + mesh.element_facets  # midpoint of local facet j (between v_j and v_{j+1})
    v = mesh.elements
    elements = np.concatenate([
        np.column_stack([v[:, 0], m[:, 0], m[:, 2]]),
        np.column_stack([m[:, 0], v[:, 1], m[:, 1]]),
        np.column_stack([m[:, 2], m[:, 1], v[:, 2]]),
        np.column_stack([m[:, 0], m[:, 1], m[:, 2]]),
    ])
    # carry boundary tags to child facets via the parent facet of each midpoint
    parent_tag = {}
    for f in mesh.boundary_facets:
        a, b = mesh.facets[f]
        parent_tag[(min(a, V + f), max(a, V + f))] = mesh.boundary_tags[f]
        parent_tag[(min(b, V + f), max(b, V + f))] = mesh.boundary_tags[f]
    child = from_elements(vertices, elements)
    tags = np.zeros(child.n_facets, dtype=np.int64)
    for f in child.boundary_facets:
        tags[f] = parent_tag.get(tuple(child.facets[f]), DEFAULT_BOUNDARY_TAG)
    object.__setattr__(child, "boundary_tags", tags)
    tags.setflags(write=False)
    return child


# ---------------------------------------------------------------------------
# file formats


def write_mesh(mesh: Mesh, path) -> None:
    """Write the plain-text mesh format.

    Layout::

        E B F
        V
        x y                                  (V lines)
        a b c                                (E lines, counter-clockwise)
        a b Kplus jplus Kminus jminus tag    (F lines, Kminus = -1 on boundary)
    """
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"{mesh.n_elements} {mesh.n_boundary_facets} {mesh.n_facets}\n")
        fh.write(f"{mesh.n_vertices}\n")
        np.savetxt(fh, mesh.vertices, fmt="%.17g")
        np.savetxt(fh, mesh.elements, fmt="%d")
        data = np.column_stack([mesh.facets, mesh.facet_elements[:, 0], mesh.facet_local[:, 0],
                                mesh.facet_elements[:, 1], mesh.facet_local[:, 1],
                                mesh.boundary_tags])
        np.savetxt(fh, data, fmt="%d")


def read_mesh(path) -> Mesh:
    """Read the format written by :func:`write_mesh`.

    Facet records are cross-checked against the topology rebuilt from the
    element list; boundary tags are taken from the file.
    """
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    try:
        E, B, F = (int(t) for t in lines[0].split())
        V = int(lines[1])
        verts = np.array([ln.split() for ln in lines[2:2 + V]], dtype=float)
        elems = np.array([ln.split() for ln in lines[2 + V:2 + V + E]], dtype=np.int64)
        fac = np.array([ln.split() for ln in lines[2 + V + E:2 + V + E + F]], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise MeshError(f"malformed mesh file {path}") from exc
    if verts.shape != (V, 2) or elems.shape != (E, 3) or fac.shape != (F, 7):
        raise MeshError(f"malformed mesh file {path}")
    mesh = from_elements(verts, elems)
    if mesh.n_facets != F or mesh.n_boundary_facets != B:
        raise MeshError("facet counts in header do not match the element list")
    lookup = {tuple(ab): i for i, ab in enumerate(mesh.facets)}
    tags = np.zeros(F, dtype=np.int64)
    for rec in fac:
        key = (min(rec[0], rec[1]), max(rec[0], rec[1]))
        if key not in lookup:
            raise MeshError(f"facet {key} is not an edge of the element list")
        tags[lookup[key]] = rec[6]
    object.__setattr__(mesh, "boundary_tags", tags)
    tags.setflags(write=False)
    return mesh


def read_triangle(node_path, ele_path) -> Mesh:
    """Import Shewchuk Triangle ``.node``/``.ele`` files (facets rebuilt)."""

    def _rows(p):
        out = []
        for ln in Path(p).read_text().splitlines():
            ln = ln.split("#", 1)[0].strip()
            if ln:
                out.append(ln.split())
        return out

    nodes = _rows(node_path)
    nv = int(nodes[0][0])
    ids = np.array([int(r[0]) for r in nodes[1:1 + nv]])
    xy = np.array([[float(r[1]), float(r[2])] for r in nodes[1:1 + nv]])
    eles = _rows(ele_path)
    ne, npe = int(eles[0][0]), int(eles[0][1])
    if npe < 3:
        raise MeshError("triangle .ele file must list at least three nodes per element")
    conn = np.array([[int(t) for t in r[1:4]] for r in eles[1:1 + ne]])
    remap = np.full(ids.max() + 1, -1)
    remap[ids] = np.arange(nv)
    return from_elements(xy, remap[conn])


def write_triangle(mesh: Mesh, node_path, ele_path) -> None:
    with Path(node_path).open("w") as fh:
        fh.write(f"{mesh.n_vertices} 2 0 0\n")
        for i, (x, y) in enumerate(mesh.vertices):
            fh.write(f"{i} {x:.17g} {y:.17g}\n")
    with Path(ele_path).open("w") as fh:
        fh.write(f"{mesh.n_elements} 3 0\n")
        for i, (a, b, c) in enumerate(mesh.elements):
            fh.write(f"{i} {a} {b} {c}\n")
