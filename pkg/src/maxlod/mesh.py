"""Structured tetrahedral meshes of axis-aligned boxes and element-patch algebra.

The only mesh family supported is the Kuhn (Freudenthal) triangulation of a
regular grid of subcubes: every subcube is split into the six tetrahedra that
share its main diagonal.  This keeps containment maps between nested meshes
exact and makes all entity tables reproducible.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

# Local edges of a tetrahedron as pairs of local vertex indices.
LOCAL_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
# Local faces as triples of local vertex indices.
LOCAL_FACES = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))

# The six Kuhn tetrahedra of the unit cube, one per permutation of the axes.
_KUHN_PERMS = tuple(itertools.permutations((0, 1, 2)))


class MeshError(ValueError):
    """Invalid mesh construction arguments or unsupported mesh input."""


@dataclass
class Mesh:
    """Conforming tetrahedral mesh with full entity tables.

    Immutable by convention: no method mutates the arrays after construction.
    """

    vertices: np.ndarray          # (nv, 3) float
    cells: np.ndarray             # (nc, 4) int, vertex indices
    edges: np.ndarray             # (ne, 2) int, each row sorted ascending
    faces: np.ndarray             # (nf, 3) int, each row sorted ascending
    cell2edge: np.ndarray         # (nc, 6) int
    cell2edge_sign: np.ndarray    # (nc, 6) int, +1/-1 local vs global orientation
    cell2face: np.ndarray         # (nc, 4) int
    boundary_vertex: np.ndarray   # (nv,) bool
    boundary_edge: np.ndarray     # (ne,) bool
    boundary_face: np.ndarray     # (nf,) bool
    mesh_size: float              # max cell diameter
    n: int                        # subdivisions per axis (structured meshes)
    box: np.ndarray               # (2, 3) lower/upper bounds
    _vertex2cells: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def vertex_to_cells(self, v: int) -> np.ndarray:
        return self._vertex2cells[v]

    def cell_volumes(self) -> np.ndarray:
        p = self.vertices[self.cells]
        d = p[:, 1:] - p[:, :1]
        return np.abs(np.linalg.det(d)) / 6.0


@dataclass
class Patch:
    """Order-m closure-adjacency neighborhood of a seed element."""

    seed_cell: int
    order_m: int
    cells: np.ndarray             # sorted cell indices

    def __contains__(self, cell: int) -> bool:
        return bool(np.isin(cell, self.cells))


@dataclass
class MeshPair:
    """Nested coarse/fine mesh pair with exact containment maps."""

    coarse: Mesh
    fine: Mesh
    fine2coarse: np.ndarray       # (nc_fine,) coarse cell index per fine cell
    factor: int

    def coarse_to_fine_cells(self, coarse_cell: int) -> np.ndarray:
        return np.flatnonzero(self.fine2coarse == coarse_cell)

    @staticmethod
    def trivial(mesh: Mesh) -> "MeshPair":
        """Coarse and fine meshes coincide (refinement ratio one)."""
        return MeshPair(mesh, mesh, np.arange(mesh.n_cells), 1)


def build_structured_mesh(n: int, box=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))) -> Mesh:
    """Kuhn triangulation of the box with n subcubes per axis."""
    if n < 1:
        raise MeshError(f"subdivision count must be >= 1, got {n}")
    box = np.asarray(box, dtype=float).reshape(2, 3)
    if not np.all(box[1] > box[0]):
        raise MeshError("box upper bounds must exceed lower bounds")

    k = n + 1
    axes = [np.linspace(box[0][d], box[1][d], k) for d in range(3)]
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    vertices = np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])

    def vid(i, j, l):
        return i + k * (j + k * l)

    cells = np.empty((6 * n**3, 4), dtype=np.int64)
    idx = 0
    for l in range(n):
        for j in range(n):
            for i in range(n):
                base = np.array([i, j, l])
                for perm in _KUHN_PERMS:
                    c = base.copy()
                    verts = [vid(*c)]
                    for ax in perm:
                        c = c.copy()
                        c[ax] += 1
                        verts.append(vid(*c))
                    cells[idx] = verts
                    idx += 1

    edges, cell2edge, cell2edge_sign = _edge_tables(cells)
    faces, cell2face, face_count = _face_tables(cells)

    boundary_face = face_count == 1
    boundary_vertex = np.zeros(vertices.shape[0], dtype=bool)
    boundary_vertex[np.unique(faces[boundary_face])] = True
    # An edge is on the boundary iff it lies in some boundary face.
    boundary_edge = _edges_of_faces(edges, faces[boundary_face])

    h = float(np.linalg.norm((box[1] - box[0]) / n))

    mesh = Mesh(
        vertices=vertices, cells=cells, edges=edges, faces=faces,
        cell2edge=cell2edge, cell2edge_sign=cell2edge_sign, cell2face=cell2face,
        boundary_vertex=boundary_vertex, boundary_edge=boundary_edge,
        boundary_face=boundary_face, mesh_size=h, n=n, box=box,
    )
    mesh._vertex2cells = _invert_incidence(cells, vertices.shape[0])
    return mesh


def _edge_tables(cells: np.ndarray):
    nc = cells.shape[0]
    raw = np.empty((nc, 6, 2), dtype=np.int64)
    for k, (a, b) in enumerate(LOCAL_EDGES):
        raw[:, k, 0] = cells[:, a]
        raw[:, k, 1] = cells[:, b]
    sign = np.where(raw[:, :, 0] < raw[:, :, 1], 1, -1).astype(np.int64)
    lo = raw.min(axis=2)
    hi = raw.max(axis=2)
    pairs = np.stack([lo, hi], axis=2).reshape(-1, 2)
    edges, inv = np.unique(pairs, axis=0, return_inverse=True)
    cell2edge = inv.reshape(nc, 6)
    return edges, cell2edge, sign


def _face_tables(cells: np.ndarray):
    nc = cells.shape[0]
    raw = np.empty((nc, 4, 3), dtype=np.int64)
    for k, (a, b, c) in enumerate(LOCAL_FACES):
        raw[:, k, 0] = cells[:, a]
        raw[:, k, 1] = cells[:, b]
        raw[:, k, 2] = cells[:, c]
    tri = np.sort(raw.reshape(-1, 3), axis=1)
    faces, inv, counts = np.unique(tri, axis=0, return_inverse=True, return_counts=True)
    cell2face = inv.reshape(nc, 4)
    return faces, cell2face, counts


def _edges_of_faces(edges: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Boolean mask over `edges` marking edges contained in any given face."""
    if faces.size == 0:
        return np.zeros(edges.shape[0], dtype=bool)
    fe = np.concatenate([
        faces[:, [0, 1]], faces[:, [0, 2]], faces[:, [1, 2]],
    ])
    fe = np.unique(fe, axis=0)
    ne = edges.shape[0]
    # Match sorted pairs via a void view for set membership.
    key = edges[:, 0].astype(np.int64) * (edges.max() + 1) + edges[:, 1]
    fkey = fe[:, 0].astype(np.int64) * (edges.max() + 1) + fe[:, 1]
    return np.isin(key, fkey)


def _invert_incidence(cells: np.ndarray, nv: int) -> list[np.ndarray]:
    order = np.argsort(cells.ravel(), kind="stable")
    flat_cells = np.repeat(np.arange(cells.shape[0]), 4)[order]
    flat_verts = cells.ravel()[order]
    splits = np.searchsorted(flat_verts, np.arange(1, nv))
    return [np.unique(a) for a in np.split(flat_cells, splits)]


def patch(mesh: Mesh, seed: int, m: int) -> Patch:
    """N^m(T): m rounds of closure (shared-vertex) adjacency expansion."""
    if not 0 <= seed < mesh.n_cells:
        raise IndexError(f"seed cell {seed} out of range")
    if m < 0:
        raise MeshError(f"patch order must be >= 0, got {m}")
    current = np.zeros(mesh.n_cells, dtype=bool)
    current[seed] = True
    for _ in range(m):
        verts = np.unique(mesh.cells[current])
        grown = current.copy()
        for v in verts:
            grown[mesh.vertex_to_cells(v)] = True
        if np.array_equal(grown, current):
            break
        current = grown
    return Patch(seed_cell=seed, order_m=m, cells=np.flatnonzero(current))


def overlap_constant(mesh: Mesh, m: int) -> int:
    """Max number of elements contained in any m-th order element patch."""
    best = 0
    for seed in range(mesh.n_cells):
        best = max(best, patch(mesh, seed, m).cells.size)
        if best == mesh.n_cells:
            break
    return best


def refine(mesh: Mesh, factor: int) -> MeshPair:
    """Nested fine mesh obtained by subdividing every subcube `factor` times."""
    if factor < 2:
        raise MeshError(f"refinement factor must be >= 2, got {factor}")
    if mesh.n < 1:
        raise MeshError("refine requires a structured mesh")
    fine = build_structured_mesh(mesh.n * factor, mesh.box)
    fine2coarse = locate_cells(mesh, _centroids(fine))
    return MeshPair(coarse=mesh, fine=fine, fine2coarse=fine2coarse, factor=factor)


def _centroids(mesh: Mesh) -> np.ndarray:
    return mesh.vertices[mesh.cells].mean(axis=1)


def locate_cells(mesh: Mesh, points: np.ndarray) -> np.ndarray:
    """Structured-mesh point location: subcube by flooring, tet by coordinate order."""
    rel = (points - mesh.box[0]) / (mesh.box[1] - mesh.box[0]) * mesh.n
    cube = np.clip(np.floor(rel).astype(np.int64), 0, mesh.n - 1)
    local = rel - cube
    # Kuhn tet for permutation sigma is {t : t[s0] >= t[s1] >= t[s2]}.
    order = np.argsort(-local, axis=1, kind="stable")
    perm_index = np.array([_KUHN_PERMS.index(tuple(o)) for o in map(tuple, order)])
    cube_index = cube[:, 0] + mesh.n * (cube[:, 1] + mesh.n * cube[:, 2])
    return cube_index * 6 + perm_index


def barycentric_coordinates(mesh: Mesh, cell, points: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of points w.r.t. cells, shape (npts, 4).

    `cell` is either a single index (all points in one cell) or an array of
    one cell index per point.
    """
    cell = np.asarray(cell, dtype=np.int64)
    points = np.atleast_2d(points)
    if cell.ndim == 0:
        cell = np.full(points.shape[0], int(cell), dtype=np.int64)
    verts = mesh.vertices[mesh.cells[cell]]            # (npts, 4, 3)
    mat = np.ones((points.shape[0], 4, 4))
    mat[:, :, 1:] = verts
    rhs = np.ones((points.shape[0], 4))
    rhs[:, 1:] = points
    return np.linalg.solve(np.transpose(mat, (0, 2, 1)), rhs[..., None])[..., 0]


def dump_mesh(mesh: Mesh, path) -> None:
    """Plain-text dump: one vertex per line, then one cell per line."""
    with open(path, "w") as fh:
        fh.write(f"{mesh.n_vertices} {mesh.n_cells}\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for c in mesh.cells:
            fh.write(f"{c[0]} {c[1]} {c[2]} {c[3]}\n")
