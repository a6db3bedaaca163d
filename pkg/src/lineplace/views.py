"""Viewpoint-normalized appearance patches for 3-D lines.

A virtual orthographic camera is placed 0.5 m from the line midpoint along
the mean of the adjacent surface normals, with the line itself as the up
axis.  The frame's colored point cloud is splatted onto the virtual image
plane with z-buffering at a density-adaptive working resolution, holes are
filled by harmonic inpainting, and the result is resized to 96x64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .camera import PointCloud
from .geometry import Line3D

VIRTUAL_WIDTH = 96
VIRTUAL_HEIGHT = 64
ASPECT = VIRTUAL_WIDTH / VIRTUAL_HEIGHT  # 1.5

CAMERA_DISTANCE_M = 0.5
MAX_VIEW_DISTANCE_M = 1.0
WIDTH_EXTENT_FACTOR = 1.5
HEIGHT_EXTENT_FACTOR = 1.0
MIN_WORKING_HEIGHT = 32
MAX_WORKING_HEIGHT = 256


@dataclass(frozen=True)
class VirtualCamera:
    """Orthographic camera anchored to a 3-D line."""

    center: np.ndarray  # [3]
    view: np.ndarray  # unit, into the scene
    up: np.ndarray  # unit, along the line
    half_width: float  # meters
    half_height: float
    max_distance: float

    def __post_init__(self):
        if abs(float(self.view @ self.up)) > 1e-9:
            raise ValueError("virtual camera view must be orthogonal to up")
        if self.max_distance <= 0:
            raise ValueError("max_distance must be positive")

    @property
    def right(self) -> np.ndarray:
        return np.cross(self.up, self.view)


def virtual_camera_for_line(line: Line3D) -> VirtualCamera:
    """Camera 0.5 m out along the mean surface normal, up along the line.

    The mean normal is orthogonalized against the line direction so the
    camera is exactly line-aligned even when the fitted normals are not
    perfectly perpendicular to the line.  Nearly opposing normals (degenerate
    mean) fall back to the camera-closer plane's normal.
    """
    normals = line.nonzero_normals()
    mean_n = np.mean(normals, axis=0)
    u = line.direction
    if np.linalg.norm(mean_n) < 1e-6 and len(normals) == 2:
        closer = min(normals, key=lambda n: _plane_depth_along(line, n))
        mean_n = closer.copy()
    mean_n = mean_n - (mean_n @ u) * u
    norm = np.linalg.norm(mean_n)
    if norm < 1e-9:
        raise ValueError("line normals are parallel to the line; no viewing direction")
    mean_n = mean_n / norm
    length = line.length
    return VirtualCamera(
        center=line.midpoint + CAMERA_DISTANCE_M * mean_n,
        view=-mean_n,
        up=u,
        half_width=0.5 * WIDTH_EXTENT_FACTOR * length,
        half_height=0.5 * HEIGHT_EXTENT_FACTOR * length,
        max_distance=MAX_VIEW_DISTANCE_M,
    )


def _plane_depth_along(line: Line3D, normal) -> float:
    # proxy for "closer plane": depth of the line midpoint (shared by both
    # planes), advanced along the normal; smaller z wins
    return float(line.midpoint[2] - normal[2] * 0.01)


def working_resolution(n_points: int) -> tuple[int, int]:
    """(height, width): density-adaptive, height = clamp(sqrt(n/aspect), 32, 256)."""
    h = int(np.clip(np.sqrt(max(n_points, 1) / ASPECT), MIN_WORKING_HEIGHT, MAX_WORKING_HEIGHT))
    return h, int(round(ASPECT * h))


def render_orthographic(cloud: PointCloud, cam: VirtualCamera, resolution: tuple[int, int] | None = None):
    """Splat the cloud onto the virtual image plane; returns (image, validity).

    Points inside the orthographic frustum (extent box, depth in (0,
    max_distance]) map to the pixel of their plane coordinates; the
    depth-nearest point wins each pixel.
    """
    if cloud.colors is None:
        raise ValueError("render_orthographic needs a cloud with colors")
    rel = cloud.points - cam.center
    x = rel @ cam.right
    y = rel @ cam.up
    z = rel @ cam.view
    keep = (
        (np.abs(x) <= cam.half_width)
        & (np.abs(y) <= cam.half_height)
        & (z > 0)
        & (z <= cam.max_distance)
    )
    if resolution is None:
        h, w = working_resolution(int(keep.sum()))
    else:
        h, w = resolution
    image = np.zeros((h, w, 3), dtype=np.float64)
    valid = np.zeros((h, w), dtype=bool)
    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        return image, valid
    x, y, z = x[idx], y[idx], z[idx]
    cols = np.clip(((x + cam.half_width) / (2 * cam.half_width) * w).astype(int), 0, w - 1)
    rows = np.clip(((y + cam.half_height) / (2 * cam.half_height) * h).astype(int), 0, h - 1)
    flat = rows * w + cols
    # z-buffer: sort by depth descending so the nearest point writes last
    order = np.argsort(-z, kind="stable")
    image.reshape(-1, 3)[flat[order]] = cloud.colors[idx][order]
    valid.reshape(-1)[flat] = True
    return image, valid


def inpaint_holes(image: np.ndarray, valid: np.ndarray, dilation_px: int = 2) -> np.ndarray:
    """Fill invalid pixels with the harmonic (Laplace) interpolant.

    Valid pixels are Dirichlet boundary values and are never modified.
    Invalid regions with no valid neighbor anywhere (fully empty view)
    stay black.  The sparse direct solve is the exact fixed point of
    neighbor-averaging diffusion.
    """
    h, w, _ = image.shape
    if valid.all():
        return image.copy()
    out = image.copy()
    if not valid.any():
        return np.zeros_like(image)
    hole = ~valid
    ids = -np.ones((h, w), dtype=np.int64)
    hy, hx = np.nonzero(hole)
    n = hy.size
    ids[hy, hx] = np.arange(n)
    rows, cols, vals = [], [], []
    rhs = np.zeros((n, 3), dtype=np.float64)
    degree = np.zeros(n, dtype=np.float64)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx = hy + dy, hx + dx
        ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        degree += ok
        oy, ox = ny[ok], nx[ok]
        src = np.nonzero(ok)[0]
        nb_hole = hole[oy, ox]
        # hole neighbor: off-diagonal entry; valid neighbor: boundary term
        rows.extend(src[nb_hole])
        cols.extend(ids[oy[nb_hole], ox[nb_hole]])
        vals.extend(-np.ones(int(nb_hole.sum())))
        vb = ~nb_hole
        rhs[src[vb]] += image[oy[vb], ox[vb]]
    rows.extend(range(n))
    cols.extend(range(n))
    vals.extend(degree)
    lap = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    # isolated components (no valid neighbor transitively) give a singular
    # system; regularize by a tiny diagonal bump pulling them toward 0
    lap = lap + scipy.sparse.eye(n, format="csr") * 1e-12
    fill = scipy.sparse.linalg.spsolve(lap, rhs)
    if fill.ndim == 1:
        fill = fill[:, None]
    out[hy, hx] = fill
    return out


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-center coordinate mapping."""
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bot = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def finalize(image: np.ndarray) -> np.ndarray:
    """Resize to the canonical 96x64 patch and clamp to [0, 1]."""
    out = resize_bilinear(image, VIRTUAL_HEIGHT, VIRTUAL_WIDTH)
    return np.clip(out, 0.0, 1.0)


def virtual_image_for_line(line: Line3D, cloud: PointCloud, dilation_px: int = 2) -> np.ndarray:
    """Full pipeline: camera, splat, inpaint, finalize. Returns [64, 96, 3]."""
    cam = virtual_camera_for_line(line)
    raw, valid = render_orthographic(cloud, cam)
    filled = inpaint_holes(raw, valid, dilation_px)
    return finalize(filled)
