import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nbmf.geometry import (ScanGeometry, default_step, fov_radius, ray_for, rays_for,
                           rotation_matrix, sample_plan, sample_points, uniform_angles)


def geom(sod, sdd, n_det, det_size):
    return ScanGeometry(sod, sdd, n_det, det_size, ((0.0,),))


def test_fov_radius_paper_geometry(paper_geometry):
    assert fov_radius(paper_geometry) == pytest.approx(132.16, abs=0.01)


def test_fov_radius_45_degree_half_fan():
    # half-width equal to sdd puts the edge ray at 45 degrees
    assert fov_radius(geom(100.0, 150.0, 150, 2.0)) == pytest.approx(100 / math.sqrt(2), abs=1e-12)


def test_fov_radius_similar_triangles():
    g = geom(500.0, 1000.0, 300, 2.0)
    # distance from the centre to the edge ray, which makes angle atan(h/sdd) with the central ray
    alpha = math.atan2(300.0, 1000.0)
    assert fov_radius(g) == pytest.approx(500.0 * math.sin(alpha), rel=1e-12)
    assert fov_radius(g) == pytest.approx(143.67, abs=0.005)


def test_default_step_reproduces_paper_value(paper_geometry):
    assert default_step(paper_geometry, 512) == pytest.approx(0.2581, abs=5e-5)


@pytest.mark.parametrize("kwargs", [
    dict(sod=0, sdd=10, n_det=4, det_size=1),
    dict(sod=10, sdd=10, n_det=4, det_size=1),
    dict(sod=10, sdd=20, n_det=0, det_size=1),
    dict(sod=10, sdd=20, n_det=4, det_size=0),
])
def test_invalid_geometry_rejected(kwargs):
    with pytest.raises(ValueError):
        ScanGeometry(angle_sets=((0.0,),), **kwargs)


def test_angles_outside_full_turn_rejected():
    with pytest.raises(ValueError):
        ScanGeometry(1000, 1500, 4, 1, ((2 * math.pi,),))


def test_central_ray_at_zero():
    g = geom(1000.0, 1536.0, 1, 1.0)
    r = ray_for(g, 0.0, 0)
    np.testing.assert_allclose(r.origin, [0, 1000, 0], atol=1e-12)
    np.testing.assert_allclose(r.direction, [0, -1, 0], atol=1e-12)


def test_ray_with_u_equal_sdd():
    # one unit of width 2*sdd is not centred at u = sdd, so use two units of width sdd
    g = geom(1000.0, 1536.0, 2, 2 * 1536.0)
    r = ray_for(g, 0.0, 1)   # centre at u = +sdd
    np.testing.assert_allclose(r.direction, [1 / math.sqrt(2), -1 / math.sqrt(2), 0], atol=1e-12)


def test_ray_quarter_turn():
    g = geom(1000.0, 1536.0, 1, 1.0)
    r = ray_for(g, math.pi / 2, 0)
    np.testing.assert_allclose(r.origin, [-1000, 0, 0], atol=1e-9)
    np.testing.assert_allclose(r.direction, [1, 0, 0], atol=1e-12)


def test_detector_index_out_of_range():
    g = geom(1000.0, 1536.0, 4, 1.0)
    with pytest.raises(IndexError):
        ray_for(g, 0.0, 4)
    with pytest.raises(IndexError):
        ray_for(g, 0.0, -1)


def test_detector_coordinates_are_centred():
    g = geom(1000.0, 1536.0, 4, 2.0)
    np.testing.assert_allclose(g.detector_u(np.arange(4)), [-3, -1, 1, 3])


@pytest.mark.property
@settings(max_examples=50, deadline=None)
@given(phi=st.floats(0, 2 * math.pi - 1e-9), j=st.integers(0, 63))
def test_rotation_equivariance(phi, j):
    g = geom(1000.0, 1536.0, 64, 3.0)
    r0, r = ray_for(g, 0.0, j), ray_for(g, phi, j)
    rot = rotation_matrix(phi)
    np.testing.assert_allclose(r.origin, rot @ r0.origin, atol=1e-12 * 1000)
    np.testing.assert_allclose(r.direction, rot @ r0.direction, atol=1e-12)
    assert abs(np.linalg.norm(r.direction) - 1) < 1e-12


def test_vectorised_rays_match_single(small_geometry):
    phi = np.array(small_geometry.angle_sets[0])
    o, d = rays_for(small_geometry, np.repeat(phi, 32), np.tile(np.arange(32), phi.size))
    for i in (0, 17, 100, 383):
        r = ray_for(small_geometry, phi[i // 32], i % 32)
        np.testing.assert_array_equal(r.origin, o[i])
        np.testing.assert_array_equal(r.direction, d[i])


@pytest.mark.property
def test_fan_covers_fov():
    g = geom(1000.0, 1536.0, 64, 3.0)
    R = fov_radius(g)
    for phi in np.linspace(0, 2 * math.pi, 7, endpoint=False):
        o, d = rays_for(g, np.full(64, phi), np.arange(64))
        # distance from the origin to each ray line
        dist = np.abs(o[:, 0] * d[:, 1] - o[:, 1] * d[:, 0])
        assert np.all(dist <= R + 1e-9)


def test_sample_count_paper_values():
    g = geom(1000.0, 1536.0, 512, 0.8)
    plan = sample_plan(g, 0.2581)
    assert plan.n_points == math.ceil(2 * 132.16 / 0.2581) == 1025


def test_sample_step_equal_to_diameter_gives_midpoint():
    g = geom(1000.0, 1536.0, 512, 0.8)
    R = fov_radius(g)
    r = ray_for(g, 0.0, 256)
    pts = sample_points(r, g, 2 * R)
    assert pts.shape == (1, 3)
    assert sample_plan(g, 2 * R).t[0] == pytest.approx(1000.0, abs=1e-9)


def test_first_sample_and_spacing():
    g = geom(1000.0, 1536.0, 512, 0.8)
    R = fov_radius(g)
    plan = sample_plan(g, 0.5)
    assert plan.t[0] == pytest.approx(1000.0 - R + 0.25, abs=1e-12)
    np.testing.assert_allclose(np.diff(plan.t), 0.5, atol=1e-10)
    assert np.all((plan.t >= plan.t_start) & (plan.t <= plan.t_end))
    assert plan.t_end > plan.t_start


def test_central_ray_samples_stay_near_fov():
    g = geom(1000.0, 1536.0, 1, 1.0)
    R = fov_radius(g)
    pts = sample_points(ray_for(g, 1.234, 0), g, 0.7)
    assert np.all(np.linalg.norm(pts, axis=1) <= R + 0.7)


@pytest.mark.property
def test_sample_spacing_along_ray_is_step():
    g = geom(1000.0, 1536.0, 16, 5.0)
    pts = sample_points(ray_for(g, 0.3, 3), g, 0.9)
    np.testing.assert_allclose(np.linalg.norm(np.diff(pts, axis=0), axis=1), 0.9, atol=1e-9)


def test_nonpositive_step_rejected():
    g = geom(1000.0, 1536.0, 16, 5.0)
    with pytest.raises(ValueError):
        sample_plan(g, 0.0)


valid = st.tuples(st.floats(10, 2000), st.floats(1.05, 4.0), st.floats(1, 800))


@pytest.mark.property
@settings(max_examples=100, deadline=None)
@given(valid, st.floats(1.01, 2.0))
def test_fov_monotonicity(params, factor):
    sod, ratio, h = params
    sdd = sod * ratio
    base = fov_radius(geom(sod, sdd, 1, 2 * h))
    assert fov_radius(geom(sod, sdd, 1, 2 * h * factor)) > base
    assert fov_radius(geom(sod * min(factor, ratio * 0.999), sdd, 1, 2 * h)) >= base
    assert fov_radius(geom(sod, sdd * factor, 1, 2 * h)) < base
    assert 0 < base < sod


def test_interleaved_angle_sets_are_disjoint():
    even = uniform_angles(720, offset=0, stride=2, total=1441)
    odd = uniform_angles(720, offset=1, stride=2, total=1441)
    assert len(even) == len(odd) == 720
    assert not set(even) & set(odd)
    step = 2 * math.pi / 1441
    assert odd[0] == pytest.approx(step)
    assert even[1] == pytest.approx(2 * step)


def test_geometry_dict_roundtrip(paper_geometry):
    assert ScanGeometry.from_dict(paper_geometry.to_dict()) == paper_geometry
