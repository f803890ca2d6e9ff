import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mif.geometry import (Aabb, GeometryError, Pose, Ray, as_points, invert_pose, nearest_rotation,
                          rotation_about_axis, transform_point)


def random_pose(rng) -> Pose:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    r = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return Pose(r, rng.normal(scale=5.0, size=3))


seeds = st.integers(min_value=0, max_value=2**32 - 1)


class TestTransformPoint:
    def test_identity(self):
        np.testing.assert_array_equal(transform_point(Pose.identity(), [1, 2, 3]), [1, 2, 3])

    def test_pure_translation(self):
        pose = Pose(np.eye(3), [0, 0, 5])
        np.testing.assert_array_equal(transform_point(pose, [0, 0, 0]), [0, 0, 5])

    def test_quarter_turn_about_z(self):
        r = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        np.testing.assert_allclose(transform_point(Pose(r, np.zeros(3)), [1, 0, 0]), [0, 1, 0], atol=1e-9)

    def test_rodrigues_matches_hand_matrix(self):
        np.testing.assert_allclose(rotation_about_axis([0, 0, 1], np.pi / 2),
                                   [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)

    def test_batch_shape(self, rng):
        pts = rng.normal(size=(7, 3))
        assert transform_point(random_pose(rng), pts).shape == (7, 3)

    @settings(max_examples=50, deadline=None)
    @given(seeds)
    def test_preserves_distances(self, seed):
        rng = np.random.default_rng(seed)
        pose = random_pose(rng)
        a, b = rng.normal(size=(2, 3)) * 10
        d0 = np.linalg.norm(a - b)
        d1 = np.linalg.norm(transform_point(pose, a) - transform_point(pose, b))
        assert abs(d0 - d1) < 1e-9


class TestInvertPose:
    def test_identity(self):
        assert invert_pose(Pose.identity()) == Pose.identity()

    def test_translation(self):
        inv = invert_pose(Pose(np.eye(3), [1, 2, 3]))
        np.testing.assert_array_equal(inv.translation, [-1, -2, -3])
        np.testing.assert_array_equal(inv.rotation, np.eye(3))

    @settings(max_examples=30, deadline=None)
    @given(seeds)
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        pose = random_pose(rng)
        pts = rng.normal(scale=20.0, size=(100, 3))
        back = transform_point(invert_pose(pose), transform_point(pose, pts))
        np.testing.assert_allclose(back, pts, atol=1e-9)

    def test_compose_with_inverse_is_identity(self, rng):
        pose = random_pose(rng)
        m = (pose @ invert_pose(pose)).matrix()
        np.testing.assert_allclose(m, np.eye(4), atol=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(seeds)
    def test_composition_associative(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (random_pose(rng) for _ in range(3))
        np.testing.assert_allclose(((a @ b) @ c).matrix(), (a @ (b @ c)).matrix(), atol=1e-9)

    def test_compose_applies_right_first(self, rng):
        a, b = random_pose(rng), random_pose(rng)
        p = rng.normal(size=3)
        np.testing.assert_allclose(transform_point(a @ b, p), transform_point(a, transform_point(b, p)), atol=1e-12)


class TestPoseValidation:
    def test_rejects_scaled_rotation(self):
        with pytest.raises(GeometryError):
            Pose(2 * np.eye(3), np.zeros(3))

    def test_rejects_reflection(self):
        with pytest.raises(GeometryError):
            Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_rejects_nan(self):
        with pytest.raises(GeometryError):
            Pose(np.eye(3), [np.nan, 0, 0])

    def test_matrix_round_trip(self, rng):
        pose = random_pose(rng)
        assert Pose.from_matrix(pose.matrix()) == pose

    def test_immutable(self):
        pose = Pose.identity()
        with pytest.raises(ValueError):
            pose.translation[0] = 1.0

    def test_nearest_rotation_projects(self, rng):
        r = random_pose(rng).rotation + 1e-4 * rng.normal(size=(3, 3))
        q = nearest_rotation(r)
        np.testing.assert_allclose(q @ q.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(q) == pytest.approx(1.0)
        assert np.abs(q - r).max() < 1e-3


class TestAabbAndRay:
    def test_of_points(self):
        box = Aabb.of_points([[0, 1, 2], [3, -1, 5]])
        np.testing.assert_array_equal(box.min, [0, -1, 2])
        np.testing.assert_array_equal(box.max, [3, 1, 5])
        assert box.contains([[1, 0, 3]]).all()

    def test_invalid_box(self):
        with pytest.raises(GeometryError):
            Aabb([1, 0, 0], [0, 1, 1])

    def test_union_and_pad(self):
        u = Aabb([0, 0, 0], [1, 1, 1]).union(Aabb([-1, 2, 0], [0, 3, 0.5]))
        np.testing.assert_array_equal(u.min, [-1, 0, 0])
        np.testing.assert_array_equal(u.padded(1.0).max, [2, 4, 2])

    def test_ray_through(self):
        ray = Ray.through([1, 0, 0], [1, 0, 4])
        assert ray.depth == 4.0
        np.testing.assert_array_equal(ray.direction, [0, 0, 1])
        np.testing.assert_array_equal(ray.at(4.0), [1, 0, 4])

    def test_ray_requires_unit_direction(self):
        with pytest.raises(GeometryError):
            Ray([0, 0, 0], [0, 0, 2], 1.0)

    def test_ray_requires_positive_depth(self):
        with pytest.raises(GeometryError):
            Ray([0, 0, 0], [0, 0, 1], 0.0)

    def test_as_points_shape_check(self):
        with pytest.raises(GeometryError):
            as_points(np.zeros((3, 2)))
