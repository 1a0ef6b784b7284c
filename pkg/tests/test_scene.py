import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from helpers import plane_scene
from vfnerf.scene import (
    Albedo,
    Box,
    Camera,
    Intrinsics,
    Plane,
    Ray,
    Scene,
    Sphere,
    nearest_batch,
    nearest_surface_point,
    oracle_color_batch,
    oracle_vf,
    oracle_vf_batch,
    raycast,
    raycast_batch,
    sample_surface,
    visible_mask,
)

WIDE = ((-10.0,) * 3, (10.0,) * 3)


def scene_of(*prims, near=0.05, far=20.0):
    return Scene(tuple(prims), *WIDE, near=near, far=far)


def box_distance(x, lo, hi):
    """Distance to the surface of an axis-aligned box, written from scratch for inside and outside points."""
    lo, hi = np.asarray(lo), np.asarray(hi)
    outside = np.maximum(np.maximum(lo - x, x - hi), 0.0)
    if np.any(outside > 0):
        return float(np.linalg.norm(outside))
    return float(min((x - lo).min(), (hi - x).min()))


class TestNearestSurfacePoint:
    def test_plane(self):
        p, d = nearest_surface_point(scene_of(Plane((0, 0, 1.0), 0.0)), (0, 0, 2.0))
        npt.assert_array_equal(p, [0, 0, 0])
        assert d == 2.0

    def test_sphere(self):
        p, d = nearest_surface_point(scene_of(Sphere((0, 0, 0.0), 1.0)), (2.0, 0, 0))
        npt.assert_allclose(p, [1, 0, 0])
        assert d == pytest.approx(1.0)

    def test_plane_and_sphere_picks_closer(self):
        s = scene_of(Plane((0, 0, 1.0), 0.0), Sphere((0, 0, 5.0), 1.0))
        p, d = nearest_surface_point(s, (0, 0, 3.5))
        npt.assert_allclose(p, [0, 0, 4])
        # |x - x_S| = 0.5; the sphere (0.5) beats the plane (3.5)
        assert d == pytest.approx(0.5)
        assert nearest_batch(s, np.array([[0, 0, 3.5]])).owner[0] == 1

    def test_tie_goes_to_lowest_index(self):
        s = scene_of(Plane((0, 0, 1.0), 0.0), Plane((0, 0, -1.0), -2.0))
        res = nearest_batch(s, np.array([[0.3, 0.1, 1.0]]))
        assert res.owner[0] == 0
        npt.assert_allclose(res.point[0], [0.3, 0.1, 0.0])

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_box_distance_inside_and_outside(self, seed):
        rng = np.random.default_rng(seed)
        lo, hi = (-1.0, -0.5, 0.0), (1.0, 0.5, 2.0)
        s = scene_of(Box(lo, hi))
        x = rng.uniform(-2, 3, size=(50, 3))
        res = nearest_batch(s, x)
        for xi, di, pi in zip(x, res.dist, res.point):
            assert di == pytest.approx(box_distance(xi, lo, hi), abs=1e-12)
            assert box_distance(pi, lo, hi) == pytest.approx(0.0, abs=1e-12)

    def test_empty_scene_rejected(self):
        with pytest.raises(ValueError):
            nearest_batch(Scene((), *WIDE), np.zeros((1, 3)))


class TestOracleVf:
    def test_above_plane(self):
        v, on = oracle_vf(scene_of(Plane((0, 0, 1.0), 0.0)), (0, 0, 2.0))
        npt.assert_array_equal(v, [0, 0, -1])
        assert not on

    def test_inside_sphere_points_out(self):
        v, _ = oracle_vf(scene_of(Sphere((0, 0, 0.0), 1.0)), (0.5, 0, 0))
        npt.assert_allclose(v, [1, 0, 0])

    def test_below_plane_flips(self):
        v, _ = oracle_vf(scene_of(Plane((0, 0, 1.0), 0.0)), (3.0, 4.0, -2.0))
        npt.assert_array_equal(v, [0, 0, 1])

    def test_on_surface_flag(self):
        v, on = oracle_vf(scene_of(Sphere((0, 0, 0.0), 1.0)), (0.0, 1.0, 0.0))
        assert on
        npt.assert_allclose(v, [0, -1, 0])

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_unit_norm_and_points_at_nearest(self, seed, box_scene):
        rng = np.random.default_rng(seed)
        x = rng.uniform(box_scene.lo, box_scene.hi, size=(300, 3))
        f = oracle_vf_batch(box_scene, x)
        res = nearest_batch(box_scene, x)
        off = ~f.on_surface
        npt.assert_allclose(np.linalg.norm(f.v[off], axis=1), 1.0, atol=1e-9)
        proj = np.einsum("ij,ij->i", f.v[off], res.point[off] - x[off])
        npt.assert_allclose(proj, res.dist[off], atol=1e-9)

    @given(
        x=st.floats(-3, 3), y=st.floats(-3, 3), z=st.floats(0.001, 2.0),
        nx=st.floats(-1, 1), ny=st.floats(-1, 1),
    )
    def test_surface_criterion_on_plane(self, x, y, z, nx, ny):
        n = np.array([nx, ny, 1.0])
        n /= np.linalg.norm(n)
        s = scene_of(Plane(tuple(n), 0.0))
        p = np.array([x, y, 0.0]) - n * (np.dot([x, y, 0.0], n))
        gap = 1e-3
        a, _ = oracle_vf(s, p + 0.4 * gap * n)
        b, _ = oracle_vf(s, p - 0.6 * gap * n)
        assert np.dot(a, b) == pytest.approx(-1.0, abs=1e-6)
        # same side of an isolated plane
        c, _ = oracle_vf(s, p + z * n)
        assert np.dot(a, c) == pytest.approx(1.0, abs=1e-6)


class TestRaycast:
    def test_plane_hit(self):
        t, rgb = raycast(scene_of(Plane((0, 0, 1.0), 0.0)), Ray((0, 0, 2.0), (0, 0, -1.0)))
        assert t == pytest.approx(2.0)

    def test_plane_miss_is_black(self):
        t, rgb = raycast(scene_of(Plane((0, 0, 1.0), 0.0)), Ray((0, 0, 2.0), (0, 0, 1.0)))
        assert t is None
        npt.assert_array_equal(rgb, 0.0)

    def test_sphere_axial(self):
        t, _ = raycast(scene_of(Sphere((0, 0, 0.0), 1.0)), Ray((-2.0, 0, 0), (1.0, 0, 0)))
        assert t == pytest.approx(1.0)

    def test_batch_miss_uses_far(self):
        s = scene_of(Plane((0, 0, 1.0), 0.0), far=7.0)
        h = raycast_batch(s, np.array([[0, 0, 2.0]]), np.array([[0, 0, 1.0]]))
        assert not h.hit[0] and h.t[0] == 7.0

    @given(offset=st.floats(-3, 3), height=st.floats(0.2, 4), axis=st.integers(0, 2), sign=st.sampled_from([-1.0, 1.0]))
    def test_axis_orthogonal_depth(self, offset, height, axis, sign):
        n = np.zeros(3)
        n[axis] = sign
        s = scene_of(Plane(tuple(n), offset))
        origin = n * (offset + height)
        t, _ = raycast(s, Ray(origin, -n))
        assert t == pytest.approx(abs(np.dot(origin, n) - offset), abs=1e-12)

    def test_nearest_hit_wins(self):
        s = scene_of(Plane((0, 0, 1.0), 0.0), Sphere((0, 0, 1.0), 0.5))
        t, _ = raycast(s, Ray((0, 0, 3.0), (0, 0, -1.0)))
        assert t == pytest.approx(1.5)

    def test_from_inside_sphere(self):
        t, _ = raycast(scene_of(Sphere((0, 0, 0.0), 1.0)), Ray((0.0, 0, 0), (0, 1.0, 0)))
        assert t == pytest.approx(1.0)

    def test_near_limit_excludes_close_hits(self):
        s = scene_of(Plane((0, 0, 1.0), 0.0), near=0.5)
        assert raycast(s, Ray((0, 0, 0.3), (0, 0, -1.0)))[0] is None

    def test_color_is_albedo_at_hit(self):
        checker = Albedo("checker", ((1.0, 0.0, 0.0), (0.0, 0.0, 1.0)), 1.0)
        s = scene_of(Plane((0, 0, 1.0), 0.0, checker))
        colors = {tuple(raycast(s, Ray((x, 0.25, 1.0), (0, 0, -1.0)))[1]) for x in (0.25, 1.25)}
        assert colors == {(1.0, 0.0, 0.0), (0.0, 0.0, 1.0)}


class TestBoxRoom:
    def test_all_pixels_hit(self, box_scene, box_cameras):
        for cam in box_cameras.train + box_cameras.holdout:
            assert raycast_batch(box_scene, *cam.rays()).hit.all()

    def test_oracle_color_matches_raycast(self, box_scene, box_cameras):
        o, d = box_cameras.train[0].rays()
        h = raycast_batch(box_scene, o, d)
        npt.assert_allclose(oracle_color_batch(box_scene, o + h.t[:, None] * d), h.rgb)

    def test_sample_surface_on_surfaces_and_visible(self, box_scene, box_cameras):
        pts = sample_surface(box_scene, np.random.default_rng(0), 200.0)
        assert len(pts) > 1000
        npt.assert_allclose(nearest_batch(box_scene, pts).dist, 0.0, atol=1e-9)
        assert np.all((pts >= box_scene.lo - 1e-9) & (pts <= box_scene.hi + 1e-9))
        vis = visible_mask(box_scene, pts, box_cameras.train)
        assert 0 < vis.mean() < 1


class TestSampling:
    def test_area_uniform_on_sphere(self):
        s = scene_of(Sphere((0, 0, 0.0), 1.0))
        pts = sample_surface(s, np.random.default_rng(3), 4000.0)
        assert len(pts) == pytest.approx(4000 * 4 * math.pi, rel=0.02)
        # area uniform on a sphere means z is uniform on [-1, 1]
        counts, _ = np.histogram(pts[:, 2], bins=4, range=(-1, 1))
        npt.assert_allclose(counts / counts.sum(), 0.25, atol=0.02)

    def test_plane_clipped_to_bounds(self):
        s = plane_scene()
        pts = sample_surface(s, np.random.default_rng(1), 10.0)
        assert len(pts) == pytest.approx(10 * 100, rel=0.1)
        npt.assert_allclose(pts[:, 2], 0.0, atol=1e-12)

    def test_occluded_points_not_visible(self):
        s = scene_of(Plane((0, 0, 1.0), 0.0), Sphere((0, 0, 1.0), 0.3))
        cam = Camera.look_at(Intrinsics.from_fov(16, 16, 60), (0, 0, 3.0), (0, 0, 0), up=(0, 1, 0))
        vis = visible_mask(s, np.array([[0, 0, 0.0], [1.0, 0, 0.0], [0, 0, 1.3]]), [cam])
        npt.assert_array_equal(vis, [False, True, True])


class TestValidation:
    def test_primitive_invariants(self):
        with pytest.raises(ValueError):
            Sphere((0, 0, 0), 0.0)
        with pytest.raises(ValueError):
            Box((0, 0, 0), (1, 0, 1))
        assert Plane((0, 0, 2.0), 0.0).unit_norm_error() == pytest.approx(1.0)

    def test_scene_invariants(self):
        with pytest.raises(ValueError):
            Scene((), *WIDE, near=2.0, far=1.0)
        with pytest.raises(ValueError):
            Scene((), *WIDE, near=-0.1)
        with pytest.raises(ValueError):
            Scene((), *WIDE, center=(20.0, 0, 0))

    def test_camera_invariants(self):
        with pytest.raises(ValueError):
            Intrinsics(0.0, 1.0, 0, 0, 4, 4)
        with pytest.raises(ValueError):
            Camera(Intrinsics(1, 1, 2, 2, 4, 4), np.diag([1.0, 1.0, 1.01]), np.zeros(3))

    def test_ray_direction_must_be_unit(self):
        with pytest.raises(ValueError):
            Ray((0, 0, 0), (0, 0, 1.0 + 1e-9))

    def test_albedo_validation(self):
        with pytest.raises(ValueError):
            Albedo("checker", ((1, 1, 1),))
        with pytest.raises(ValueError):
            Albedo("constant", ((1.5, 0, 0),))


class TestCamera:
    def test_principal_ray_and_projection_round_trip(self, rng):
        cam = Camera.look_at(Intrinsics(20.0, 20.0, 8.0, 6.0, 16, 12), (0.5, -1.0, 1.2), (0.0, 2.0, 0.8))
        o, d = cam.rays()
        assert o.shape == d.shape == (16 * 12, 3)
        npt.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
        pts = o + d * rng.uniform(0.5, 3.0, size=(len(d), 1))
        row, col, z = cam.project(pts)
        rows, cols = np.divmod(np.arange(16 * 12), 16)
        npt.assert_allclose(row, rows, atol=1e-9)
        npt.assert_allclose(col, cols, atol=1e-9)
        assert np.all(z > 0)

    def test_dict_round_trip(self):
        cam = Camera.look_at(Intrinsics.from_fov(8, 6, 70), (1, 2, 3), (0, 0, 0))
        back = Camera.from_dict(cam.to_dict())
        npt.assert_array_equal(back.pose, cam.pose)
        assert back.intrinsics == cam.intrinsics
