"""Plucker-ray geometry tests."""

import numpy as np
import pytest

from mvar.camera import plucker, ray_grid
from mvar.scenegen import make_pose


def test_moment_perpendicular_to_direction():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        o = rng.normal(size=3) * 5
        d = rng.normal(size=3)
        r = plucker(o, d)
        assert abs(r[:3] @ r[3:]) <= 1e-12


def test_direction_is_unit():
    r = plucker([1, 2, 3], [0, 0, 10])
    assert np.allclose(r[3:], [0, 0, 1])


def test_translation_along_line_invariance():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        o = rng.normal(size=3)
        d = rng.normal(size=3)
        t = rng.normal() * 10
        a = plucker(o, d)
        b = plucker(o + t * d, d)
        assert np.max(np.abs(a - b)) <= 1e-10


def test_zero_direction_raises():
    with pytest.raises(ValueError):
        plucker([1, 0, 0], [0, 0, 0])


def test_ray_grid_shape_and_directions():
    pose = make_pose(40.0, 25.0)
    rays = ray_grid(pose, 8, 8)
    assert rays.shape == (64, 6)
    # orthographic: every token shares the viewing direction
    assert np.allclose(rays[:, 3:], rays[0, 3:])
    assert abs(np.linalg.norm(rays[0, 3:]) - 1.0) <= 1e-12
    forward = np.array(pose.axes()[2])
    assert np.max(np.abs(rays[0, 3:] - forward)) <= 1e-12


def test_ray_grid_moments_match_plucker():
    pose = make_pose(10.0, 60.0)
    h = w = 4
    rays = ray_grid(pose, h, w)
    right, up, forward = pose.axes()
    s = pose.scale
    for i in range(h):
        for j in range(w):
            u = (j + 0.5) / w * 2 * s - s
            v = -((i + 0.5) / h * 2 * s - s)
            o = np.array(pose.origin) + u * right + v * up
            assert np.max(np.abs(rays[i * w + j] - plucker(o, forward))) <= 1e-12


def test_center_ray_passes_through_look_at_point():
    # odd grid: the middle cell's ray runs straight through the origin the
    # camera looks at, so its moment equals target x d = 0
    pose = make_pose(33.0, 12.0)
    rays = ray_grid(pose, 3, 3)
    center = rays[4]
    target = np.zeros(3)
    expected_moment = np.cross(target, center[3:])
    assert np.max(np.abs(center[:3] - expected_moment)) <= 1e-9


def test_rays_distinguish_views():
    a = ray_grid(make_pose(0.0), 4, 4)
    b = ray_grid(make_pose(90.0), 4, 4)
    assert not np.allclose(a, b)
