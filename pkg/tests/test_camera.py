"""Pinhole model and depth-band pooling against hand-computed geometry.

Backprojection oracles: the principal point at depth 1 maps to (0, 0, 1),
and a pixel fx to its right at depth 2 maps to (2, 0, 2).  For the band
pooling, an upward image segment (direction (0, -1)) at column c puts its
left band at u < c, so a depth step across the column yields different
pooled means on the two sides.
"""

from __future__ import annotations

import numpy as np
import pytest

from lineplace.camera import (
    Frame,
    PinholeCamera,
    band_pixel_mask,
    check_pose,
    frame_point_cloud,
    invert_pose,
    pool_depth_band,
    transform_directions,
    transform_points,
)
from lineplace.detect import Segment2D

from conftest import flat_frame, small_camera


# -- backproject / project ---------------------------------------------------------


def test_backproject_principal_point():
    cam = PinholeCamera(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)
    np.testing.assert_allclose(cam.backproject(320.0, 240.0, 1.0), [0.0, 0.0, 1.0], atol=1e-12)


def test_backproject_one_focal_length_right():
    cam = PinholeCamera(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)
    np.testing.assert_allclose(cam.backproject(820.0, 240.0, 2.0), [2.0, 0.0, 2.0], atol=1e-12)


def test_backproject_hand_value():
    # x = (100 - 320) * 1.5 / 500 = -0.66, y = (80 - 240) * 1.5 / 500 = -0.48
    cam = PinholeCamera(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)
    np.testing.assert_allclose(cam.backproject(100.0, 80.0, 1.5), [-0.66, -0.48, 1.5], atol=1e-12)


def test_project_round_trip_precision():
    cam = PinholeCamera(fx=525.0, fy=520.0, cx=319.5, cy=239.5, width=640, height=480)
    rng = np.random.default_rng(0)
    u = rng.uniform(0, 639, size=1000)
    v = rng.uniform(0, 479, size=1000)
    z = rng.uniform(0.3, 5.0, size=1000)
    pts = cam.backproject(u, v, z)
    u2, v2 = cam.project(pts)
    assert np.abs(u2 - u).max() < 1e-9
    assert np.abs(v2 - v).max() < 1e-9


def test_backproject_rejects_bad_depth():
    cam = small_camera()
    with pytest.raises(ValueError, match="positive depth"):
        cam.backproject(1.0, 1.0, 0.0)
    with pytest.raises(ValueError, match="positive depth"):
        cam.backproject(1.0, 1.0, np.inf)


def test_project_rejects_nonpositive_z():
    cam = small_camera()
    with pytest.raises(ValueError):
        cam.project(np.array([[0.0, 0.0, 0.0]]))
    with pytest.raises(ValueError):
        cam.project(np.array([[0.0, 0.0, -1.0]]))


def test_ray_is_unit_and_through_pixel():
    cam = small_camera()
    r = cam.ray(10.0, 20.0)
    np.testing.assert_allclose(np.linalg.norm(r), 1.0, atol=1e-12)
    # scaling the ray to depth z reproduces backproject
    z = 2.5
    p = r * (z / r[2])
    np.testing.assert_allclose(p, cam.backproject(10.0, 20.0, z), atol=1e-12)


def test_depth_to_points_zero_depth_gives_zero_point():
    cam = small_camera()
    depth = np.full((cam.height, cam.width), 2.0)
    depth[5, 7] = 0.0
    pts = cam.depth_to_points(depth)
    assert pts.shape == (cam.height, cam.width, 3)
    np.testing.assert_array_equal(pts[5, 7], [0.0, 0.0, 0.0])
    assert np.all(pts[pts[..., 2] > 0][:, 2] == 2.0)


def test_in_bounds_margin():
    cam = small_camera(width=80, height=60)
    assert cam.in_bounds(0, 0)
    assert cam.in_bounds(79, 59)
    assert not cam.in_bounds(80, 0)
    assert not cam.in_bounds(0, -1)
    assert not cam.in_bounds(4, 30, margin=5)
    assert cam.in_bounds(5, 30, margin=5)


# -- poses -----------------------------------------------------------------------


def _rotation_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    pose = np.eye(4)
    pose[:3, :3] = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    return pose


def test_check_pose_accepts_rigid():
    pose = _rotation_z(0.3)
    pose[:3, 3] = [1.0, 2.0, 3.0]
    check_pose(pose)


def test_check_pose_rejects_nonorthonormal():
    pose = np.eye(4)
    pose[0, 1] = 0.1
    with pytest.raises(ValueError, match="orthonormal"):
        check_pose(pose)


def test_check_pose_rejects_bad_last_row():
    pose = np.eye(4)
    pose[3, 0] = 1.0
    with pytest.raises(ValueError, match="last row"):
        check_pose(pose)


def test_invert_pose_round_trip():
    pose = _rotation_z(0.7)
    pose[:3, 3] = [0.5, -1.0, 2.0]
    np.testing.assert_allclose(invert_pose(pose) @ pose, np.eye(4), atol=1e-12)


def test_transform_points_and_directions():
    pose = _rotation_z(np.pi / 2)
    pose[:3, 3] = [1.0, 0.0, 0.0]
    np.testing.assert_allclose(transform_points(pose, [[1.0, 0.0, 0.0]]), [[1.0, 1.0, 0.0]], atol=1e-12)
    # directions ignore the translation
    np.testing.assert_allclose(transform_directions(pose, [[1.0, 0.0, 0.0]]), [[0.0, 1.0, 0.0]], atol=1e-12)


# -- bands -------------------------------------------------------------------------


def test_band_sides_disjoint_and_in_span():
    seg = Segment2D((10.0, 30.0), (50.0, 30.0))
    left = band_pixel_mask(seg, "left", 5, 60, 80)
    right = band_pixel_mask(seg, "right", 5, 60, 80)
    assert not np.any(left & right)
    vs, us = np.nonzero(left | right)
    assert us.min() >= 10 and us.max() <= 50
    assert np.all(np.abs(vs - 30) <= 5)


def test_band_width_counts():
    # horizontal segment spanning 41 columns; each band is width x span pixels
    seg = Segment2D((10.0, 30.0), (50.0, 30.0))
    for w in (1, 3, 10):
        left = band_pixel_mask(seg, "left", w, 60, 80)
        right = band_pixel_mask(seg, "right", w, 60, 80)
        assert left.sum() == 41 * w
        assert right.sum() == 41 * w


def test_band_left_of_upward_segment_is_smaller_u():
    # direction (0, -1): cross = d_x * rel_v - d_y * rel_u = rel_u, so left
    # (cross < 0) is u < 40
    seg = Segment2D((40.0, 50.0), (40.0, 10.0))
    left = band_pixel_mask(seg, "left", 5, 60, 80)
    right = band_pixel_mask(seg, "right", 5, 60, 80)
    _, us_l = np.nonzero(left)
    _, us_r = np.nonzero(right)
    assert us_l.max() < 40
    assert us_r.min() > 40


def test_band_rejects_bad_args():
    seg = Segment2D((0.0, 0.0), (10.0, 0.0))
    with pytest.raises(ValueError, match="side"):
        band_pixel_mask(seg, "up", 5, 60, 80)
    with pytest.raises(ValueError, match="band_width_px"):
        band_pixel_mask(seg, "left", 0, 60, 80)


def test_pool_depth_band_flat_wall_equal_sides():
    frame = flat_frame(depth_value=2.0)
    seg = Segment2D((40.0, 10.0), (40.0, 50.0))
    left = pool_depth_band(frame, seg, "left")
    right = pool_depth_band(frame, seg, "right")
    assert len(left.points) > 0 and len(right.points) > 0
    np.testing.assert_allclose(left.points[:, 2].mean(), 2.0, atol=1e-12)
    np.testing.assert_allclose(right.points[:, 2].mean(), 2.0, atol=1e-12)


def test_pool_depth_band_step_edge():
    # upward segment at u = 40; nearer surface (depth 1) on the viewer's left
    frame = flat_frame(depth_value=1.0)
    frame.depth[:, 40:] = 2.0
    seg = Segment2D((40.0, 50.0), (40.0, 10.0))
    left = pool_depth_band(frame, seg, "left")
    right = pool_depth_band(frame, seg, "right")
    np.testing.assert_allclose(left.points[:, 2], 1.0, atol=1e-12)
    np.testing.assert_allclose(right.points[:, 2], 2.0, atol=1e-12)
    assert right.points[:, 2].mean() - left.points[:, 2].mean() == 1.0


def test_pool_depth_band_skips_missing_depth():
    frame = flat_frame(depth_value=2.0)
    frame.depth[:, :40] = 0.0
    seg = Segment2D((40.0, 50.0), (40.0, 10.0))
    left = pool_depth_band(frame, seg, "left")
    assert len(left.points) == 0
    assert len(left.colors) == 0


def test_frame_point_cloud_counts_and_stride():
    frame = flat_frame(depth_value=2.0, width=80, height=60)
    frame.depth[0, 0] = 0.0
    cloud = frame_point_cloud(frame)
    assert len(cloud.points) == 80 * 60 - 1
    assert np.all(cloud.points[:, 2] == 2.0)
    assert cloud.colors.min() >= 0.0 and cloud.colors.max() <= 1.0
    strided = frame_point_cloud(frame, stride=2)
    assert len(strided.points) == 40 * 30 - 1
