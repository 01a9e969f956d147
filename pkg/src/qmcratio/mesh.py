"""Conforming triangle meshes of polygonal domains with uniform red refinement.

Meshes are immutable after construction; refinement returns a new mesh that
keeps a reference to its parent together with the nodal interpolation
(prolongation) matrix, so piecewise linear fields can be transferred along a
refinement chain.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import sparse


@dataclass(frozen=True)
class MeshGeometry:
    """Per-element and per-edge geometric data of a triangle mesh.

    Attributes
    ----------
    areas : (nt,) element areas (all positive).
    h_t : (nt,) local mesh sizes, ``h_T = sqrt(area)``.
    hat_gradients : (nt, 3, 2) gradients of the three nodal hat functions on
        each element (constant per element for P1).
    edge_lengths : (ne,) Euclidean edge lengths.
    edge_normals : (ne, 2) unit normals, orientation arbitrary but fixed.
    """

    areas: np.ndarray
    h_t: np.ndarray
    hat_gradients: np.ndarray
    edge_lengths: np.ndarray
    edge_normals: np.ndarray


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Conforming simplicial mesh of a polygon.

    Attributes
    ----------
    vertices : (nv, 2) float array of vertex coordinates.
    triangles : (nt, 3) int array of vertex indices, counterclockwise.
    edges : (ne, 2) int array of vertex pairs, each row sorted, rows in
        lexicographic (min vertex, max vertex) order.
    edge_tris : (ne, 2) int array with the adjacent triangle indices of each
        edge; the second entry is -1 for boundary edges.
    boundary_vertex : (nv,) bool array marking Dirichlet vertices.
    level : refinement generation (0 for an initial mesh).
    shape_constant : max over elements of (longest edge)^2 / area; does not
        grow under uniform red refinement.
    parent : mesh this one was refined from, or None.
    parent_interp : sparse (nv, nv_parent) nodal interpolation matrix from
        the parent mesh, or None.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    edge_tris: np.ndarray
    boundary_vertex: np.ndarray
    level: int = 0
    shape_constant: float = 0.0
    parent: Optional["TriangleMesh"] = None
    parent_interp: Optional[sparse.csr_matrix] = None

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def num_dofs(self) -> int:
        """Total P1 degrees of freedom (all vertices, Dirichlet included)."""
        return self.num_vertices

    @property
    def num_free_dofs(self) -> int:
        """Interior (non-Dirichlet) degrees of freedom."""
        return int(np.sum(~self.boundary_vertex))

    @property
    def free_vertices(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_vertex)

    @property
    def interior_edge_mask(self) -> np.ndarray:
        return self.edge_tris[:, 1] >= 0

    @property
    def interior_edges(self) -> np.ndarray:
        """(n_int, 2) vertex pairs of edges shared by exactly two triangles."""
        return self.edges[self.interior_edge_mask]

    @property
    def h_max(self) -> float:
        return float(np.max(self.geometry.h_t))

    @cached_property
    def geometry(self) -> MeshGeometry:
        return _compute_geometry(self)

    def dump_csv(self, directory: str) -> None:
        """Write ``vertices.csv`` (x, y, boundary) and ``triangles.csv``."""
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "vertices.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "boundary"])
            for (x, y), b in zip(self.vertices, self.boundary_vertex):
                w.writerow([repr(float(x)), repr(float(y)), int(b)])
        with open(os.path.join(directory, "triangles.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["v0", "v1", "v2"])
            for tri in self.triangles:
                w.writerow([int(tri[0]), int(tri[1]), int(tri[2])])


def _signed_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = vertices[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def make_mesh(
    vertices: np.ndarray,
    triangles: np.ndarray,
    level: int = 0,
    parent: Optional[TriangleMesh] = None,
    parent_interp: Optional[sparse.csr_matrix] = None,
) -> TriangleMesh:
    """Build a validated mesh from raw vertex and connectivity arrays.

    Triangles with clockwise orientation are reordered; degenerate elements,
    unused vertices and non-conforming edge sharing are rejected.
    """
    vertices = np.ascontiguousarray(vertices, dtype=float)
    triangles = np.ascontiguousarray(triangles, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] != 2:
        raise ValueError("vertices must be an (nv, 2) array")
    if triangles.ndim != 2 or triangles.shape[1] != 3:
        raise ValueError("triangles must be an (nt, 3) array")

    areas = _signed_areas(vertices, triangles)
    flip = areas < 0
    if np.any(flip):
        triangles = triangles.copy()
        triangles[flip] = triangles[flip][:, [0, 2, 1]]
        areas = np.abs(areas)
    if np.any(areas <= 0):
        raise ValueError("mesh contains a degenerate (zero-area) triangle")

    used = np.unique(triangles)
    if used.size != vertices.shape[0] or used[0] != 0 or used[-1] != vertices.shape[0] - 1:
        raise ValueError("mesh contains vertices not referenced by any triangle")

    # Edge table: unique sorted vertex pairs in lexicographic order.
    raw = np.sort(
        np.concatenate(
            [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]], axis=0
        ),
        axis=1,
    )
    edges, inverse, counts = np.unique(
        raw, axis=0, return_inverse=True, return_counts=True
    )
    if np.any(counts > 2):
        raise ValueError("non-conforming mesh: an edge is shared by more than two triangles")

    nt = triangles.shape[0]
    edge_tris = np.full((edges.shape[0], 2), -1, dtype=np.int64)
    tri_of_raw = np.tile(np.arange(nt, dtype=np.int64), 3)
    order = np.argsort(inverse, kind="stable")
    sorted_edges = inverse[order]
    sorted_tris = tri_of_raw[order]
    first = np.searchsorted(sorted_edges, np.arange(edges.shape[0]))
    edge_tris[:, 0] = sorted_tris[first]
    second = counts == 2
    edge_tris[second, 1] = sorted_tris[first[second] + 1]

    boundary_vertex = np.zeros(vertices.shape[0], dtype=bool)
    boundary_vertex[edges[~second].ravel()] = True

    p = vertices[triangles]
    side = np.stack(
        [p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1
    )
    longest_sq = np.max(np.sum(side**2, axis=2), axis=1)
    shape_constant = float(np.max(longest_sq / areas))

    return TriangleMesh(
        vertices=vertices,
        triangles=triangles,
        edges=edges,
        edge_tris=edge_tris,
        boundary_vertex=boundary_vertex,
        level=level,
        shape_constant=shape_constant,
        parent=parent,
        parent_interp=parent_interp,
    )


def unit_square_mesh(n: int) -> TriangleMesh:
    """Structured mesh of (0,1)^2 with n x n cells, two triangles per cell.

    Produces (n+1)^2 vertices and 2 n^2 triangles; all boundary vertices are
    flagged Dirichlet.
    """
    if n < 1:
        raise ValueError("subdivision count must be at least 1")
    side = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(side, side, indexing="xy")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    tris = []
    for j in range(n):
        for i in range(n):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    return make_mesh(vertices, np.array(tris))


def crosshatch_mesh(n: int) -> TriangleMesh:
    """Criss-cross mesh of (0,1)^2: n x n cells, four triangles per cell.

    Each cell is split by both diagonals through an added center vertex,
    giving (n+1)^2 + n^2 vertices and 4 n^2 triangles.  Uniform red
    refinement maps this family onto itself with doubled resolution, so the
    dof ladder is 2 n^2 + 2 n + 1, e.g. 41, 145, 545, ..., 525313 for
    n = 4, 8, 16, ..., 512.
    """
    if n < 1:
        raise ValueError("subdivision count must be at least 1")
    side = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(side, side, indexing="xy")
    corners = np.column_stack([xx.ravel(), yy.ravel()])
    centers_1d = (side[:-1] + side[1:]) / 2.0
    cx, cy = np.meshgrid(centers_1d, centers_1d, indexing="xy")
    centers = np.column_stack([cx.ravel(), cy.ravel()])
    vertices = np.vstack([corners, centers])
    n_corner = corners.shape[0]

    def vid(i, j):
        return j * (n + 1) + i

    def cid(i, j):
        return n_corner + j * n + i

    tris = []
    for j in range(n):
        for i in range(n):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            c = cid(i, j)
            tris.append((v00, v10, c))
            tris.append((v10, v11, c))
            tris.append((v11, v01, c))
            tris.append((v01, v00, c))
    return make_mesh(vertices, np.array(tris))


def uniform_refine(mesh: TriangleMesh) -> TriangleMesh:
    """Red refinement: split every triangle into 4 congruent children.

    The children of a triangle are similar to their parent, so shape
    regularity and minimal angles are preserved exactly.  Every edge midpoint
    becomes a new vertex; the returned mesh records the nodal interpolation
    matrix from the parent.
    """
    nv = mesh.num_vertices
    mid = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    vertices = np.vstack([mesh.vertices, mid])

    # Edge index lookup per triangle: local edge k connects vertices (k, k+1).
    tri_edges = _triangle_edge_indices(mesh)
    m01 = nv + tri_edges[:, 0]
    m12 = nv + tri_edges[:, 1]
    m20 = nv + tri_edges[:, 2]
    t = mesh.triangles
    children = np.concatenate(
        [
            np.column_stack([t[:, 0], m01, m20]),
            np.column_stack([t[:, 1], m12, m01]),
            np.column_stack([t[:, 2], m20, m12]),
            np.column_stack([m01, m12, m20]),
        ],
        axis=0,
    )

    ne = mesh.edges.shape[0]
    rows = np.concatenate([np.arange(nv), nv + np.repeat(np.arange(ne), 2)])
    cols = np.concatenate([np.arange(nv), mesh.edges.ravel()])
    vals = np.concatenate([np.ones(nv), np.full(2 * ne, 0.5)])
    interp = sparse.csr_matrix((vals, (rows, cols)), shape=(nv + ne, nv))

    return make_mesh(
        vertices, children, level=mesh.level + 1, parent=mesh, parent_interp=interp
    )


def _triangle_edge_indices(mesh: TriangleMesh) -> np.ndarray:
    """(nt, 3) edge indices for local edges (0,1), (1,2), (2,0)."""
    t = mesh.triangles
    ne = mesh.edges.shape[0]
    keys = mesh.edges[:, 0] * mesh.num_vertices + mesh.edges[:, 1]
    out = np.empty((t.shape[0], 3), dtype=np.int64)
    for k, (a, b) in enumerate(((0, 1), (1, 2), (2, 0))):
        lo = np.minimum(t[:, a], t[:, b])
        hi = np.maximum(t[:, a], t[:, b])
        idx = np.searchsorted(keys, lo * mesh.num_vertices + hi)
        if np.any(idx >= ne):
            raise ValueError("triangle references an unknown edge")
        out[:, k] = idx
    return out


def _compute_geometry(mesh: TriangleMesh) -> MeshGeometry:
    p = mesh.vertices[mesh.triangles]
    areas = _signed_areas(mesh.vertices, mesh.triangles)
    if np.any(areas <= 0):
        raise ValueError("degenerate triangle in mesh geometry")
    h_t = np.sqrt(areas)

    # grad of hat function i is the inward-rotated opposite edge / (2 area).
    grads = np.empty((mesh.num_triangles, 3, 2))
    for i in range(3):
        pj = p[:, (i + 1) % 3]
        pk = p[:, (i + 2) % 3]
        grads[:, i, 0] = pj[:, 1] - pk[:, 1]
        grads[:, i, 1] = pk[:, 0] - pj[:, 0]
    grads /= (2.0 * areas)[:, None, None]

    ev = mesh.vertices[mesh.edges[:, 1]] - mesh.vertices[mesh.edges[:, 0]]
    lengths = np.sqrt(np.sum(ev**2, axis=1))
    if np.any(lengths <= 0):
        raise ValueError("zero-length edge")
    normals = np.column_stack([ev[:, 1], -ev[:, 0]]) / lengths[:, None]

    return MeshGeometry(
        areas=areas,
        h_t=h_t,
        hat_gradients=grads,
        edge_lengths=lengths,
        edge_normals=normals,
    )


def min_angle(mesh: TriangleMesh) -> float:
    """Smallest interior angle of any element, in radians."""
    p = mesh.vertices[mesh.triangles]
    angles = []
    for i in range(3):
        a = p[:, (i + 1) % 3] - p[:, i]
        b = p[:, (i + 2) % 3] - p[:, i]
        cosang = np.sum(a * b, axis=1) / (
            np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
        )
        angles.append(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return float(np.min(angles))


def prolong(values: np.ndarray, src: TriangleMesh, dst: TriangleMesh) -> np.ndarray:
    """Interpolate a P1 field from ``src`` onto a refinement descendant ``dst``.

    ``dst`` must have been obtained from ``src`` by zero or more uniform
    refinements.
    """
    chain = []
    cur = dst
    while cur is not src:
        if cur.parent is None:
            raise ValueError("target mesh is not a refinement of the source mesh")
        chain.append(cur.parent_interp)
        cur = cur.parent
    out = np.asarray(values, dtype=float)
    for interp in reversed(chain):
        out = interp @ out
    return out
