import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maxlod.mesh import (Mesh, MeshError, MeshPair, barycentric_coordinates,
                         build_structured_mesh, locate_cells,
                         overlap_constant, patch, refine)


class TestStructuredMesh:
    def test_unit_cube_counts(self):
        # Kuhn split of one cube: 8 vertices, 6 tets, 19 edges (12 cube edges
        # + 6 face diagonals + 1 main diagonal), 18 faces.
        m = build_structured_mesh(1)
        assert m.n_vertices == 8
        assert m.n_cells == 6
        assert m.n_edges == 19
        assert m.faces.shape[0] == 18

    def test_n2_counts(self):
        m = build_structured_mesh(2)
        assert m.n_vertices == 27
        assert m.n_cells == 48
        assert m.n_edges == 98
        # Surface: 6 faces x (12 axis edges + 4 diagonals) minus the 24
        # cube-edge segments counted twice.
        assert int(m.boundary_edge.sum()) == 72
        # Every vertex except the center is on the boundary.
        assert int(m.boundary_vertex.sum()) == 26

    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_volumes(self, n):
        m = build_structured_mesh(n)
        vols = m.cell_volumes()
        assert vols.min() > 0
        np.testing.assert_allclose(vols, 1.0 / (6 * n**3))
        np.testing.assert_allclose(vols.sum(), 1.0)

    def test_mesh_size(self):
        m = build_structured_mesh(4)
        np.testing.assert_allclose(m.mesh_size, np.sqrt(3) / 4)

    def test_edges_sorted_and_unique(self, mesh4):
        assert np.all(mesh4.edges[:, 0] < mesh4.edges[:, 1])
        keys = mesh4.edges[:, 0] * mesh4.n_vertices + mesh4.edges[:, 1]
        assert np.unique(keys).size == keys.size

    def test_cell2edge_consistent(self, mesh2):
        # Edge k of cell c must connect two vertices of that cell.
        for c in range(mesh2.n_cells):
            cell_verts = set(mesh2.cells[c])
            for e in mesh2.cell2edge[c]:
                assert set(mesh2.edges[e]) <= cell_verts

    def test_invalid_n(self):
        with pytest.raises((MeshError, ValueError)):
            build_structured_mesh(0)


class TestPatch:
    def test_zero_layers_is_seed(self, mesh2):
        p = patch(mesh2, 0, 0)
        assert list(p.cells) == [0]

    def test_growth_and_saturation(self, mesh2):
        sizes = [patch(mesh2, 0, m).cells.size for m in range(5)]
        assert sizes == sorted(sizes)
        assert sizes[-1] == mesh2.n_cells

    @given(seed=st.integers(0, 47), m=st.integers(0, 3))
    @settings(max_examples=25, deadline=None)
    def test_nesting(self, seed, m):
        mesh = build_structured_mesh(2)
        inner = set(patch(mesh, seed, m).cells)
        outer = set(patch(mesh, seed, m + 1).cells)
        assert inner <= outer

    def test_patch_contains_vertex_star(self, mesh4):
        p = patch(mesh4, 10, 1)
        for v in mesh4.cells[10]:
            assert set(mesh4.vertex_to_cells(v)) <= set(p.cells)

    def test_overlap_constant(self, mesh2):
        c = overlap_constant(mesh2, 1)
        assert c >= patch(mesh2, 0, 1).cells.size
        assert c <= mesh2.n_cells


class TestRefine:
    def test_cell_count_and_map(self, pair42):
        assert pair42.fine.n_cells == 8 * pair42.coarse.n_cells
        counts = np.bincount(pair42.fine2coarse,
                             minlength=pair42.coarse.n_cells)
        assert counts.min() == counts.max() == 8

    def test_containment(self, pair42):
        cent = pair42.fine.vertices[pair42.fine.cells].mean(axis=1)
        lam = barycentric_coordinates(pair42.coarse, pair42.fine2coarse, cent)
        assert lam.min() > -1e-12

    def test_nested_vertices(self, pair22):
        # Every coarse vertex appears among the fine vertices.
        coarse_pts = pair22.coarse.vertices
        fine_pts = pair22.fine.vertices
        for p in coarse_pts:
            assert np.any(np.all(np.isclose(fine_pts, p), axis=1))

    def test_invalid_factor(self, mesh2):
        with pytest.raises((MeshError, ValueError)):
            refine(mesh2, 1)

    def test_trivial_pair(self, mesh2):
        pair = MeshPair.trivial(mesh2)
        assert pair.fine is pair.coarse
        assert np.array_equal(pair.fine2coarse, np.arange(mesh2.n_cells))


class TestLocate:
    @given(st.lists(st.tuples(st.floats(0.01, 0.99), st.floats(0.01, 0.99),
                              st.floats(0.01, 0.99)), min_size=1, max_size=20))
    @settings(max_examples=25, deadline=None)
    def test_located_cell_contains_point(self, pts):
        mesh = build_structured_mesh(3)
        points = np.array(pts)
        cells = locate_cells(mesh, points)
        lam = barycentric_coordinates(mesh, cells, points)
        assert lam.min() > -1e-10
        assert np.allclose(lam.sum(axis=1), 1.0)

    def test_centroids_locate_to_self(self, mesh4):
        cent = mesh4.vertices[mesh4.cells].mean(axis=1)
        assert np.array_equal(locate_cells(mesh4, cent),
                              np.arange(mesh4.n_cells))


def test_dump_roundtrip(tmp_path, mesh2):
    from maxlod.mesh import dump_mesh
    path = tmp_path / "mesh.txt"
    dump_mesh(mesh2, path)
    lines = path.read_text().splitlines()
    nv, nc = map(int, lines[0].split())
    assert (nv, nc) == (mesh2.n_vertices, mesh2.n_cells)
    assert len(lines) == 1 + nv + nc
