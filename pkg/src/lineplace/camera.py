"""Pinhole camera model and RGB-D frame containers.

Camera coordinates: x right, y down, z forward (optical axis).  Pixel (u, v)
indexes column and row; the projection of a 3-D point p is
u = fx * p.x / p.z + cx, v = fy * p.y / p.z + cy.  A depth value of zero
marks a missing measurement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import check_array, check_positive


@dataclass(frozen=True)
class PinholeCamera:
    """Intrinsics for an undistorted pinhole camera."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        check_positive(self.fx, "fx")
        check_positive(self.fy, "fy")
        check_positive(self.width, "width")
        check_positive(self.height, "height")

    def backproject(self, u, v, depth):
        """Pixels plus depth (meters, along z) to camera-frame points.

        Accepts scalars or arrays; returns [..., 3].  Depth must be finite
        and positive (0 encodes a missing measurement and is not a point).
        """
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        z = np.asarray(depth, dtype=np.float64)
        if not np.isfinite(z).all() or np.any(z <= 0):
            raise ValueError("backproject requires finite positive depth")
        x = (u - self.cx) * z / self.fx
        y = (v - self.cy) * z / self.fy
        return np.stack([x, y, z], axis=-1)

    def project(self, points):
        """Camera-frame points [..., 3] to pixel coordinates (u, v), both [...]."""
        p = np.asarray(points, dtype=np.float64)
        z = p[..., 2]
        if np.any(z <= 0):
            raise ValueError("cannot project points at or behind the camera (z <= 0)")
        u = self.fx * p[..., 0] / z + self.cx
        v = self.fy * p[..., 1] / z + self.cy
        return u, v

    def ray(self, u, v):
        """Unit direction through pixel (u, v) in camera coordinates."""
        d = np.stack(
            [
                (np.asarray(u, dtype=np.float64) - self.cx) / self.fx,
                (np.asarray(v, dtype=np.float64) - self.cy) / self.fy,
                np.ones_like(np.asarray(u, dtype=np.float64)),
            ],
            axis=-1,
        )
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def depth_to_points(self, depth):
        """Dense backprojection of a depth map [H, W] to points [H, W, 3].

        Missing pixels (depth == 0) come back as all-zero points.
        """
        depth = check_array(depth, "depth", shape=(self.height, self.width), dtype=np.float64)
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        x = (u - self.cx) * depth / self.fx
        y = (v - self.cy) * depth / self.fy
        pts = np.stack([x, y, depth], axis=-1)
        pts[depth == 0] = 0.0
        return pts

    def in_bounds(self, u, v, margin: float = 0.0):
        u = np.asarray(u)
        v = np.asarray(v)
        return (u >= margin) & (u <= self.width - 1 - margin) & (v >= margin) & (v <= self.height - 1 - margin)

    def to_dict(self):
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


@dataclass
class Frame:
    """One RGB-D observation with instance/semantic labels when available."""

    color: np.ndarray  # [H, W, 3] uint8
    depth: np.ndarray  # [H, W] float64 meters, 0 = missing
    camera: PinholeCamera
    pose_cam_to_world: np.ndarray  # [4, 4]
    instances: np.ndarray | None = None  # [H, W] int instance ids, 0 = background
    semantics: np.ndarray | None = None  # [H, W] int semantic class ids
    frame_id: str = ""

    def __post_init__(self):
        h, w = self.camera.height, self.camera.width
        self.color = check_array(self.color, "color", shape=(h, w, 3))
        self.depth = check_array(self.depth, "depth", shape=(h, w), dtype=np.float64)
        self.pose_cam_to_world = check_pose(self.pose_cam_to_world)


def check_pose(pose):
    """Validate a rigid 4x4 cam-to-world transform."""
    p = check_array(pose, "pose", shape=(4, 4), dtype=np.float64, finite=True)
    r = p[:3, :3]
    if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
        raise ValueError("pose rotation block is not orthonormal")
    if not np.allclose(p[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
        raise ValueError("pose last row must be [0, 0, 0, 1]")
    return p


def invert_pose(pose):
    pose = np.asarray(pose, dtype=np.float64)
    r = pose[:3, :3]
    t = pose[:3, 3]
    out = np.eye(4)
    out[:3, :3] = r.T
    out[:3, 3] = -r.T @ t
    return out


def transform_points(pose, points):
    """Apply a 4x4 rigid transform to points [..., 3]."""
    p = np.asarray(points, dtype=np.float64)
    r = np.asarray(pose, dtype=np.float64)[:3, :3]
    t = np.asarray(pose, dtype=np.float64)[:3, 3]
    return p @ r.T + t


def transform_directions(pose, dirs):
    """Rotate direction vectors [..., 3] (no translation)."""
    r = np.asarray(pose, dtype=np.float64)[:3, :3]
    return np.asarray(dirs, dtype=np.float64) @ r.T


@dataclass
class PointCloud:
    """Points in camera coordinates, with optional per-point colors in [0,1]."""

    points: np.ndarray  # [N, 3] float64
    colors: np.ndarray | None = None  # [N, 3] float64

    def __post_init__(self):
        self.points = check_array(self.points, "points", shape=(None, 3), dtype=np.float64, finite=True)
        if self.colors is not None:
            self.colors = check_array(self.colors, "colors", shape=(len(self.points), 3), dtype=np.float64)

    def __len__(self):
        return len(self.points)


def band_pixel_mask(segment, side: str, band_width_px: int, height: int, width: int):
    """Boolean [H, W] mask of the rectangular band on one side of a 2-D segment.

    The band is aligned with the segment: pixels whose along-segment
    coordinate falls within the segment span and whose signed perpendicular
    offset is in (0, band_width] on the requested side.  "left" is the side
    where cross(direction, pixel - start) is negative; pixels exactly on the
    line belong to neither band, so the two bands are disjoint.
    """
    if side not in ("left", "right"):
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    if band_width_px < 1:
        raise ValueError("band_width_px must be >= 1")
    a = np.asarray(segment.start, dtype=np.float64)
    b = np.asarray(segment.end, dtype=np.float64)
    d = b - a
    length = np.linalg.norm(d)
    d = d / length
    v, u = np.mgrid[0:height, 0:width]
    rel_u = u - a[0]
    rel_v = v - a[1]
    along = rel_u * d[0] + rel_v * d[1]
    cross = d[0] * rel_v - d[1] * rel_u
    in_span = (along >= 0) & (along <= length)
    if side == "left":
        return in_span & (cross < 0) & (cross >= -band_width_px)
    return in_span & (cross > 0) & (cross <= band_width_px)


def pool_depth_band(frame: Frame, segment, side: str, band_width_px: int = 10) -> PointCloud:
    """Backproject the valid-depth pixels of a band beside the segment.

    Pixels with missing depth are skipped; a band that falls entirely
    outside the image or on missing depth yields an empty cloud.
    """
    cam = frame.camera
    mask = band_pixel_mask(segment, side, band_width_px, cam.height, cam.width)
    mask &= frame.depth > 0
    v, u = np.nonzero(mask)
    if len(u) == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    pts = cam.backproject(u.astype(np.float64), v.astype(np.float64), frame.depth[v, u])
    colors = frame.color[v, u].astype(np.float64) / 255.0
    return PointCloud(pts, colors)


def frame_point_cloud(frame: Frame, stride: int = 1) -> PointCloud:
    """All valid-depth pixels of a frame as a colored camera-frame cloud."""
    depth = frame.depth[::stride, ::stride]
    color = frame.color[::stride, ::stride]
    v, u = np.nonzero(depth > 0)
    pts = frame.camera.backproject(
        (u * stride).astype(np.float64), (v * stride).astype(np.float64), depth[v, u]
    )
    return PointCloud(pts, color[v, u].astype(np.float64) / 255.0)
