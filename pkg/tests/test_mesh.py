"""Mesh construction, refinement and geometry checks."""

import numpy as np
import pytest

from qmcratio.mesh import (
    crosshatch_mesh,
    make_mesh,
    min_angle,
    prolong,
    uniform_refine,
    unit_square_mesh,
)


class TestUnitSquareMesh:
    def test_two_triangle_split(self):
        mesh = unit_square_mesh(1)
        assert mesh.num_vertices == 4
        assert mesh.num_triangles == 2

    def test_counting_n2(self):
        mesh = unit_square_mesh(2)
        assert mesh.num_vertices == 9
        assert mesh.num_triangles == 8

    def test_interior_dof_count_n4(self):
        # (n-1)^2 interior vertices by direct count
        mesh = unit_square_mesh(4)
        assert mesh.num_free_dofs == 9

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            unit_square_mesh(0)

    def test_boundary_flags(self):
        mesh = unit_square_mesh(3)
        on_edge = (
            (mesh.vertices[:, 0] == 0)
            | (mesh.vertices[:, 0] == 1)
            | (mesh.vertices[:, 1] == 0)
            | (mesh.vertices[:, 1] == 1)
        )
        assert np.array_equal(mesh.boundary_vertex, on_edge)


class TestRefinement:
    def test_four_way_split(self):
        mesh = unit_square_mesh(1)
        fine = uniform_refine(mesh)
        assert fine.num_triangles == 8
        assert fine.level == mesh.level + 1

    def test_child_size_halves(self):
        mesh = crosshatch_mesh(2)
        fine = uniform_refine(mesh)
        # h_T = sqrt(area): children have a quarter of the parent area
        assert np.allclose(np.sort(fine.geometry.h_t)[::4], np.sort(mesh.geometry.h_t) / 2)

    def test_reference_ladder_dof_count(self):
        # seven refinements of the 41-dof criss-cross mesh reach the
        # finest reference level
        mesh = crosshatch_mesh(4)
        assert mesh.num_dofs == 41
        for _ in range(7):
            mesh = uniform_refine(mesh)
        assert mesh.num_dofs == 525313

    def test_min_angle_preserved(self):
        mesh = crosshatch_mesh(3)
        fine = uniform_refine(mesh)
        assert np.isclose(min_angle(fine), min_angle(mesh))

    def test_shape_constant_preserved(self):
        mesh = unit_square_mesh(3)
        fine = uniform_refine(mesh)
        assert np.isclose(fine.shape_constant, mesh.shape_constant)

    def test_conformity_after_refinement(self):
        mesh = uniform_refine(crosshatch_mesh(3))
        counts = np.sum(mesh.edge_tris >= 0, axis=1)
        assert set(counts.tolist()) <= {1, 2}
        # every vertex is used
        assert np.unique(mesh.triangles).size == mesh.num_vertices


class TestGeometry:
    def test_h_t_unit_right_triangle(self):
        mesh = make_mesh(
            np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]])
        )
        assert np.isclose(mesh.geometry.h_t[0], np.sqrt(0.5))

    def test_edge_length(self):
        mesh = make_mesh(
            np.array([[0.0, 0.0], [0.1, 0.0], [0.0, 0.1]]), np.array([[0, 1, 2]])
        )
        lengths = mesh.geometry.edge_lengths
        assert np.isclose(np.min(lengths), 0.1)

    def test_hat_gradient_reference_triangle(self):
        mesh = make_mesh(
            np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]])
        )
        grad0 = mesh.geometry.hat_gradients[0, 0]
        assert np.allclose(grad0, [-1.0, -1.0])

    def test_area_sum(self):
        for mesh in (unit_square_mesh(5), crosshatch_mesh(4)):
            total = float(np.sum(mesh.geometry.areas))
            assert abs(total - 1.0) < 1e-12

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            make_mesh(
                np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]), np.array([[0, 1, 2]])
            )

    def test_edge_data_consistent(self):
        mesh = crosshatch_mesh(3)
        for eidx in range(mesh.edges.shape[0]):
            a, b = mesh.edges[eidx]
            for t in mesh.edge_tris[eidx]:
                if t >= 0:
                    tri = set(mesh.triangles[t].tolist())
                    assert {int(a), int(b)} <= tri

    def test_ccw_enforced(self):
        # clockwise input triangle gets reordered
        mesh = make_mesh(
            np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]]), np.array([[0, 1, 2]])
        )
        assert np.all(mesh.geometry.areas > 0)


class TestProlongation:
    def test_linear_reproduction(self):
        mesh = crosshatch_mesh(2)
        fine = uniform_refine(mesh)
        lin = 2.0 * mesh.vertices[:, 0] - 0.5 * mesh.vertices[:, 1]
        fine_lin = 2.0 * fine.vertices[:, 0] - 0.5 * fine.vertices[:, 1]
        assert np.allclose(prolong(lin, mesh, fine), fine_lin)

    def test_two_level_chain(self):
        mesh = unit_square_mesh(2)
        fine = uniform_refine(uniform_refine(mesh))
        vals = np.ones(mesh.num_vertices)
        assert np.allclose(prolong(vals, mesh, fine), 1.0)

    def test_non_descendant_rejected(self):
        a = unit_square_mesh(2)
        b = unit_square_mesh(4)
        with pytest.raises(ValueError):
            prolong(np.zeros(a.num_vertices), a, b)


def test_csv_dump(tmp_path):
    mesh = crosshatch_mesh(2)
    mesh.dump_csv(str(tmp_path))
    verts = (tmp_path / "vertices.csv").read_text().strip().splitlines()
    tris = (tmp_path / "triangles.csv").read_text().strip().splitlines()
    assert len(verts) == mesh.num_vertices + 1
    assert len(tris) == mesh.num_triangles + 1
    assert verts[0] == "x,y,boundary"
