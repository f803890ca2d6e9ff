import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mif.errors import FormatError, GridTooLargeError
from mif.geometry import Aabb
from mif.meshing import (Mesh, ScalarGrid, evaluate_grid, grid_dims, marching_cubes, read_mesh, sample_function,
                         write_mesh)
from tests.conftest import random_model


def sphere_grid(spacing=0.05, radius=1.0, center=(0.0, 0.0, 0.0)):
    b = Aabb([-1.3] * 3, [1.3] * 3)
    c = np.asarray(center)
    return sample_function(lambda p: np.linalg.norm(p - c, axis=1) - radius, b, spacing)


def edge_counts(mesh):
    e = np.sort(np.concatenate([mesh.triangles[:, [0, 1]], mesh.triangles[:, [1, 2]],
                                mesh.triangles[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return counts


class TestGrid:
    def test_dims_unit_cube(self):
        assert grid_dims(Aabb([0, 0, 0], [1, 1, 1]), 0.1) == (11, 11, 11)

    def test_points_lattice(self):
        g = sample_function(lambda p: p[:, 0], Aabb([0, 0, 0], [1, 1, 1]), 0.1)
        assert g.dims == (11, 11, 11)
        np.testing.assert_allclose(g.values[:, 0, 0], np.arange(11) * 0.1, atol=1e-12)

    def test_budget(self):
        with pytest.raises(GridTooLargeError):
            sample_function(lambda p: p[:, 0], Aabb([0, 0, 0], [10, 10, 10]), 0.01, budget=1000)

    def test_constant_field(self):
        model, _ = random_model(0)
        for layer in model.decoder.layers:
            layer.g[:] = 0.0
        model.decoder.layers[-1].b[:] = 0.25
        g = evaluate_grid(model, Aabb([-1, -1, -1], [1, 1, 1]), 0.25, masked=False)
        assert np.all(g.values == 0.25)
        assert len(marching_cubes(g)) == 0

    def test_mask_limits_geometry(self):
        model, support = random_model(1)
        g = evaluate_grid(model, Aabb([-1.5] * 3, [1.5] * 3), 0.1, masked=True)
        assert g.cell_mask.shape == tuple(d - 1 for d in g.dims)
        mesh = marching_cubes(g)
        if len(mesh):
            assert np.all(model.tree.leaf_occupied(mesh.vertices, dilate=2))
        g.cell_mask[:] = False
        assert len(marching_cubes(g)) == 0

    def test_chunked_matches_whole(self):
        f = lambda p: np.sin(p).sum(axis=1)  # noqa: E731
        b = Aabb([0, 0, 0], [1, 1, 1])
        np.testing.assert_array_equal(sample_function(f, b, 0.05, chunk=50).values,
                                      sample_function(f, b, 0.05).values)


class TestMarchingCubes:
    def test_all_positive_empty(self):
        g = ScalarGrid(np.zeros(3), 1.0, np.ones((3, 3, 3)))
        assert len(marching_cubes(g)) == 0

    def test_single_negative_corner(self):
        v = np.ones((2, 2, 2))
        v[0, 0, 0] = -1.0
        mesh = marching_cubes(ScalarGrid(np.zeros(3), 1.0, v))
        assert mesh.triangles.shape == (1, 3)
        np.testing.assert_allclose(np.sort(mesh.vertices, axis=0),
                                   [[0, 0, 0], [0, 0, 0], [0.5, 0.5, 0.5]], atol=1e-12)
        # normal points away from the negative corner
        a, b, c = mesh.vertices[mesh.triangles[0]]
        assert np.dot(np.cross(b - a, c - a), [1, 1, 1]) > 0

    def test_sphere_oracle(self):
        mesh = marching_cubes(sphere_grid(0.05))
        r = np.linalg.norm(mesh.vertices, axis=1)
        assert r.min() >= 0.95 and r.max() <= 1.05
        assert mesh.area() == pytest.approx(4 * np.pi, rel=0.05)

    def test_sphere_closed_and_shared(self):
        mesh = marching_cubes(sphere_grid(0.1))
        assert np.all(edge_counts(mesh) == 2)
        assert len(mesh.vertices) < 3 * len(mesh.triangles)
        # outward normals; lattice points with value exactly 0 give zero-area slivers
        cent = mesh.vertices[mesh.triangles].mean(axis=1)
        a, b, c = (mesh.vertices[mesh.triangles[:, i]] for i in range(3))
        d = np.einsum("ij,ij->i", np.cross(b - a, c - a), cent)
        assert np.all(d[mesh.triangle_areas() > 1e-12] > 0)

    def test_vertices_on_straddling_edges(self):
        g = sphere_grid(0.1, radius=0.83)
        mesh = marching_cubes(g)
        q = (mesh.vertices - g.origin) / g.spacing
        frac = q - np.floor(q + 1e-9)
        off_lattice = np.sum(frac > 1e-9, axis=1)
        assert np.all(off_lattice <= 1)
        np.testing.assert_allclose(np.linalg.norm(mesh.vertices, axis=1), 0.83, atol=0.02)

    def test_degenerate_free(self):
        mesh = marching_cubes(sphere_grid(0.1, center=(0.05, 0.0, 0.0)))
        t = mesh.triangles
        assert np.all((t[:, 0] != t[:, 1]) & (t[:, 1] != t[:, 2]) & (t[:, 0] != t[:, 2]))
        assert t.min() >= 0 and t.max() < len(mesh.vertices)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0.01, 100.0), st.integers(0, 2**32))
    def test_positive_scale_invariance(self, k, seed):
        rng = np.random.default_rng(seed)
        v = rng.normal(size=(6, 5, 7))
        a = marching_cubes(ScalarGrid(np.zeros(3), 0.1, v))
        b = marching_cubes(ScalarGrid(np.zeros(3), 0.1, v * k))
        np.testing.assert_array_equal(a.triangles, b.triangles)
        np.testing.assert_allclose(a.vertices, b.vertices, atol=1e-9)

    def test_iso_level(self):
        g = sphere_grid(0.1)
        a = marching_cubes(g, iso=-0.2)
        np.testing.assert_allclose(np.linalg.norm(a.vertices, axis=1), 0.8, atol=0.02)


class TestFiles:
    @pytest.mark.parametrize("ext", ["obj", "ply"])
    def test_round_trip(self, tmp_path, ext):
        mesh = marching_cubes(sphere_grid(0.2))
        write_mesh(tmp_path / f"m.{ext}", mesh, comment="hash abc")
        back = read_mesh(tmp_path / f"m.{ext}")
        np.testing.assert_array_equal(back.triangles, mesh.triangles)
        if ext == "ply":
            assert back.identical(mesh)
        else:
            np.testing.assert_allclose(back.vertices, mesh.vertices, rtol=1e-15)

    def test_ply_header(self, tmp_path):
        write_mesh(tmp_path / "m.ply", marching_cubes(sphere_grid(0.3)), comment="config_hash 123")
        head = (tmp_path / "m.ply").read_bytes().split(b"end_header")[0].decode()
        assert "format binary_little_endian 1.0" in head
        assert "comment config_hash 123" in head

    def test_obj_one_based(self, tmp_path):
        mesh = Mesh(np.eye(3), np.array([[0, 1, 2]]))
        write_mesh(tmp_path / "t.obj", mesh)
        assert "f 1 2 3" in (tmp_path / "t.obj").read_text()

    def test_unknown_extension(self, tmp_path):
        with pytest.raises(FormatError):
            write_mesh(tmp_path / "m.stl", Mesh.empty())
