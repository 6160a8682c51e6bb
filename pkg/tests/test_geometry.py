"""Tilt geometry: rotations, rays, projections and their inverses."""

import numpy as np
import pytest

from stemsplat.errors import DomainError
from stemsplat.geometry import (BeamKind, BeamModel, DetectorGrid, TiltGeometry,
                                pixel_ray, project_point, view_rotation)

from conftest import make_geometry


class TestViewRotation:
    def test_zero_angle_is_identity(self):
        assert np.allclose(view_rotation(0.0), np.eye(3), atol=1e-15)

    def test_composition(self):
        a, b = 17.0, 25.0
        combined = view_rotation(a) @ view_rotation(b)
        assert np.allclose(combined, view_rotation(a + b), atol=1e-12)

    def test_90_maps_beam_axis_to_u(self):
        # At 90 degrees the world beam axis (+z at 0 degrees) lands on the
        # detector u axis: the first row dotted with e_z must be 1.
        rot = view_rotation(90.0)
        assert np.allclose(rot @ np.array([0.0, 0.0, 1.0]),
                           np.array([1.0, 0.0, 0.0]), atol=1e-12)

    def test_orthonormal_on_degree_grid(self):
        for angle in range(-89, 90):
            rot = view_rotation(float(angle))
            assert np.allclose(rot @ rot.T, np.eye(3), atol=1e-12)
            assert abs(np.linalg.det(rot) - 1.0) < 1e-12


class TestValidation:
    def test_detector_rejects_bad_sizes(self):
        with pytest.raises(DomainError):
            DetectorGrid(0, 4)
        with pytest.raises(DomainError):
            DetectorGrid(4, 4, pixel_size=0.0)

    def test_cone_requires_source_distance(self):
        with pytest.raises(DomainError):
            BeamModel(kind=BeamKind.CONE)

    def test_angles_strictly_increasing(self):
        det = DetectorGrid(4, 4)
        with pytest.raises(DomainError):
            TiltGeometry((0.0, 0.0), det)
        with pytest.raises(DomainError):
            TiltGeometry((10.0, -10.0), det)

    def test_angles_bounded_below_90(self):
        det = DetectorGrid(4, 4)
        with pytest.raises(DomainError):
            TiltGeometry((-90.0, 0.0), det)
        with pytest.raises(DomainError):
            TiltGeometry((0.0, 90.0), det)

    def test_cone_source_must_clear_detector(self):
        det = DetectorGrid(64, 64, 1.0)
        beam = BeamModel(kind=BeamKind.CONE, source_distance=10.0)
        with pytest.raises(DomainError):
            TiltGeometry((0.0,), det, beam)

    def test_view_and_pixel_range_checks(self):
        geom = make_geometry([0.0], nu=4, nv=4)
        with pytest.raises(DomainError):
            pixel_ray(geom, 1, 0, 0)
        with pytest.raises(DomainError):
            pixel_ray(geom, 0, 4, 0)
        with pytest.raises(DomainError):
            project_point(geom, -1, np.zeros(3))


class TestPixelRay:
    def test_parallel_center_pixel_at_zero_tilt(self):
        geom = make_geometry([0.0], nu=9, nv=9)
        ray = pixel_ray(geom, 0, 4, 4)
        assert np.allclose(ray.origin, np.zeros(3), atol=1e-15)
        assert np.allclose(ray.direction, np.array([0.0, 0.0, 1.0]), atol=1e-15)

    def test_parallel_rays_share_direction(self):
        geom = make_geometry([33.0], nu=8, nv=8)
        r1 = pixel_ray(geom, 0, 0, 0)
        r2 = pixel_ray(geom, 0, 7, 3)
        assert np.allclose(r1.direction, r2.direction, atol=1e-15)

    def test_cone_approaches_parallel_at_huge_distance(self):
        par = make_geometry([20.0], nu=64, nv=64)
        cone = make_geometry([20.0], nu=64, nv=64, kind=BeamKind.CONE,
                             source_distance=1e9)
        for (u, v) in [(0, 0), (31, 31), (63, 12)]:
            d_par = pixel_ray(par, 0, u, v).direction
            d_cone = pixel_ray(cone, 0, u, v).direction
            assert np.all(np.abs(d_par - d_cone) < 1e-6)

    def test_directions_unit_norm(self):
        geom = make_geometry([-40.0, 10.0], nu=6, nv=6, kind=BeamKind.CONE,
                             source_distance=50.0)
        for view in range(2):
            for (u, v) in [(0, 0), (5, 2), (3, 5)]:
                ray = pixel_ray(geom, view, u, v)
                assert abs(np.linalg.norm(ray.direction) - 1.0) < 1e-12


class TestProjectPoint:
    def test_world_origin_hits_detector_center(self):
        for angle in (-60.0, 0.0, 37.5):
            geom = make_geometry([angle], nu=64, nv=32)
            u, v, _ = project_point(geom, 0, np.zeros(3))
            assert abs(u - 31.5) < 1e-12
            assert abs(v - 15.5) < 1e-12

    @pytest.mark.parametrize("kind,source_distance",
                             [(BeamKind.PARALLEL, None), (BeamKind.CONE, 80.0)])
    def test_round_trip_named_pixel(self, kind, source_distance):
        geom = make_geometry([25.0], nu=32, nv=32, kind=kind,
                             source_distance=source_distance)
        ray = pixel_ray(geom, 0, 10, 20)
        point = ray.origin + 5.0 * ray.direction
        u, v, _ = project_point(geom, 0, point)
        assert abs(u - 10.0) < 1e-9
        assert abs(v - 20.0) < 1e-9

    @pytest.mark.parametrize("kind,source_distance",
                             [(BeamKind.PARALLEL, None), (BeamKind.CONE, 120.0)])
    def test_round_trip_random(self, kind, source_distance, rng):
        geom = make_geometry([-50.0, -10.0, 35.0], nu=40, nv=40, kind=kind,
                             source_distance=source_distance)
        for _ in range(1000):
            view = int(rng.integers(3))
            u = int(rng.integers(40))
            v = int(rng.integers(40))
            ray = pixel_ray(geom, view, u, v)
            if kind is BeamKind.CONE:
                t = float(rng.uniform(1.0, 200.0))
            else:
                t = float(rng.uniform(-30.0, 30.0))
            point = ray.origin + t * ray.direction
            uu, vv, _ = project_point(geom, view, point)
            assert abs(uu - u) < 1e-9
            assert abs(vv - v) < 1e-9

    def test_parallel_is_cone_limit(self, rng):
        par = make_geometry([15.0], nu=16, nv=16)
        cone = make_geometry([15.0], nu=16, nv=16, kind=BeamKind.CONE,
                             source_distance=1e9)
        for _ in range(50):
            p = rng.uniform(-6.0, 6.0, size=3)
            up, vp, _ = project_point(par, 0, p)
            uc, vc, _ = project_point(cone, 0, p)
            assert abs(up - uc) < 1e-5
            assert abs(vp - vc) < 1e-5

    def test_cone_magnifies_between_source_and_axis(self):
        # A point closer to the source than the rotation axis projects
        # farther off-centre than under a parallel beam.
        par = make_geometry([0.0], nu=64, nv=64)
        cone = make_geometry([0.0], nu=64, nv=64, kind=BeamKind.CONE,
                             source_distance=100.0)
        p = np.array([5.0, 0.0, -50.0])  # halfway between source and axis
        u_par, _, _ = project_point(par, 0, p)
        u_cone, _, depth = project_point(cone, 0, p)
        center = 31.5
        assert depth > 0
        assert abs(u_cone - center) > abs(u_par - center)

    def test_point_behind_cone_source_rejected(self):
        geom = make_geometry([0.0], nu=16, nv=16, kind=BeamKind.CONE,
                             source_distance=30.0)
        with pytest.raises(DomainError):
            project_point(geom, 0, np.array([0.0, 0.0, -31.0]))
