"""Lift 2-D segments to 3-D lines via neighborhood plane fits.

Each segment gets a plane fitted (RANSAC) to the backprojected depth
neighborhood on either side.  The plane pair determines the line type:

- texture: planes co-planar; the line lies within the (averaged) surface.
- discontinuity: plane centroids separated by more than a threshold along
  a surface normal; the line belongs to the camera-closer plane.
- edge: two distinct planes meeting at the line; endpoints are placed on
  the planes' intersection line.

The result carries endpoints, the adjacent plane normals (zero when a side
has no plane), metric length, and per-extremity occlusion flags, and
serializes to a fixed 15-component vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Frame, PointCloud, pool_depth_band
from .detect import Segment2D
from .validation import check_array

GEOM_DIM = 15


@dataclass(frozen=True)
class Plane:
    """Camera-facing plane fitted to a point neighborhood."""

    normal: np.ndarray  # unit, oriented so normal . centroid <= 0
    centroid: np.ndarray
    inliers: int

    def signed_distance(self, points):
        p = np.asarray(points, dtype=np.float64)
        return (p - self.centroid) @ self.normal

    @property
    def mean_depth(self) -> float:
        return float(self.centroid[2])


@dataclass
class Line3D:
    p_s: np.ndarray
    p_e: np.ndarray
    n_l: np.ndarray  # zero vector when the left plane is absent
    n_r: np.ndarray
    line_type: str  # "edge" | "texture" | "discontinuity"
    o_s: bool = False
    o_e: bool = False

    def __post_init__(self):
        self.p_s = check_array(self.p_s, "p_s", shape=(3,), dtype=np.float64, finite=True)
        self.p_e = check_array(self.p_e, "p_e", shape=(3,), dtype=np.float64, finite=True)
        self.n_l = check_array(self.n_l, "n_l", shape=(3,), dtype=np.float64, finite=True)
        self.n_r = check_array(self.n_r, "n_r", shape=(3,), dtype=np.float64, finite=True)
        if not (np.any(self.n_l != 0) or np.any(self.n_r != 0)):
            raise ValueError("a 3-D line needs at least one adjacent plane normal")
        if self.line_type not in ("edge", "texture", "discontinuity"):
            raise ValueError(f"unknown line type {self.line_type!r}")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.p_e - self.p_s))

    @property
    def direction(self) -> np.ndarray:
        d = self.p_e - self.p_s
        return d / np.linalg.norm(d)

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.p_s + self.p_e)

    def nonzero_normals(self):
        return [n for n in (self.n_l, self.n_r) if np.any(n != 0)]


def geom_vector(line: Line3D) -> np.ndarray:
    """The fixed 15-component layout [p_s, p_e, n_l, n_r, length, o_s, o_e]."""
    return np.concatenate(
        [
            line.p_s,
            line.p_e,
            line.n_l,
            line.n_r,
            [line.length, float(line.o_s), float(line.o_e)],
        ]
    )


@dataclass(frozen=True)
class GeometryConfig:
    ransac_iters: int = 50
    inlier_dist_m: float = 0.01
    min_inliers: int = 20
    band_width_px: int = 10
    coplanar_angle_tol_deg: float = 5.0
    coplanar_dist_tol_m: float = 0.02
    separation_threshold_m: float = 0.3
    min_length_3d_m: float = 0.05
    edge_margin_px: int = 5
    occ_depth_tol_m: float = 0.05
    occ_probe_px: float = 3.0


def fit_plane_ransac(
    cloud: PointCloud | np.ndarray,
    iters: int = 50,
    inlier_dist_m: float = 0.01,
    min_inliers: int = 20,
    seed: int | np.random.Generator = 0,
) -> Plane | None:
    """RANSAC plane fit; deterministic for a fixed seed; None when unsupported.

    Three-point hypotheses are scored by inlier count; the best support set
    is refined by a total-least-squares fit and the normal oriented to face
    the camera (normal . centroid <= 0).
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if iters < 1 or inlier_dist_m <= 0:
        raise ValueError("iters must be >= 1 and inlier_dist_m > 0")
    n = len(pts)
    if n < 3 or n < min_inliers:
        return None
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    best_count = 0
    best_mask = None
    for _ in range(iters):
        i, j, k = rng.choice(n, size=3, replace=False)
        normal = np.cross(pts[j] - pts[i], pts[k] - pts[i])
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        dist = np.abs((pts - pts[i]) @ normal)
        mask = dist <= inlier_dist_m
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < min_inliers:
        return None
    return _refine_plane(pts, best_mask, inlier_dist_m)


def _refine_plane(pts, mask, inlier_dist_m) -> Plane:
    """Least-squares plane over the support set; camera-facing normal."""
    inl = pts[mask]
    centroid = inl.mean(axis=0)
    d = inl - centroid
    cov = d.T @ d
    evals, evecs = np.linalg.eigh(cov)
    normal = evecs[:, 0]
    if normal @ centroid > 0:
        normal = -normal
    count = int((np.abs((pts - centroid) @ normal) <= inlier_dist_m).sum())
    return Plane(normal=normal, centroid=centroid, inliers=count)


def fit_side_planes(frame: Frame, seg: Segment2D, cfg: GeometryConfig, rng: np.random.Generator):
    """Fit the left/right neighborhood planes of a segment (either may be None)."""
    planes = []
    for side in ("left", "right"):
        cloud = pool_depth_band(frame, seg, side, cfg.band_width_px)
        planes.append(
            fit_plane_ransac(cloud, cfg.ransac_iters, cfg.inlier_dist_m, cfg.min_inliers, rng)
        )
    return planes[0], planes[1]


def _ray_plane_point(ray_dir, plane: Plane):
    """Intersection of camera ray t*d with the plane; None if parallel/behind."""
    denom = ray_dir @ plane.normal
    if abs(denom) < 1e-12:
        return None
    t = (plane.centroid @ plane.normal) / denom
    if t <= 0:
        return None
    return t * ray_dir


def _plane_intersection_line(a: Plane, b: Plane):
    """(point, unit direction) of the intersection line, or None if parallel."""
    u = np.cross(a.normal, b.normal)
    norm = np.linalg.norm(u)
    if norm < 1e-6:
        return None
    u = u / norm
    # minimal-norm point satisfying both plane equations
    d1 = a.normal @ a.centroid
    d2 = b.normal @ b.centroid
    c = a.normal @ b.normal
    det = 1.0 - c * c
    k1 = (d1 - c * d2) / det
    k2 = (d2 - c * d1) / det
    return k1 * a.normal + k2 * b.normal, u


def _closest_point_on_line_to_ray(line_pt, line_dir, ray_dir):
    """Point on the infinite line nearest to the camera ray t*d (t free).

    Falls back to the orthogonal projection of the origin-ray direction if
    the line and ray are parallel.
    """
    # minimize || line_pt + s*u - t*d ||^2 over (s, t)
    u = line_dir
    d = ray_dir / np.linalg.norm(ray_dir)
    ud = u @ d
    det = 1.0 - ud * ud
    if det < 1e-12:
        s = -(line_pt @ u)
    else:
        w = line_pt
        s = (-(w @ u) + ud * (w @ d)) / det
    return line_pt + s * u


def _coplanar(a: Plane, b: Plane, cfg: GeometryConfig) -> bool:
    cosang = abs(float(a.normal @ b.normal))
    if np.arccos(min(cosang, 1.0)) > np.deg2rad(cfg.coplanar_angle_tol_deg):
        return False
    return (
        abs(b.signed_distance(a.centroid)) <= cfg.coplanar_dist_tol_m
        and abs(a.signed_distance(b.centroid)) <= cfg.coplanar_dist_tol_m
    )


def _separation(a: Plane, b: Plane) -> float:
    """Centroid separation, max over projections onto either normal."""
    diff = a.centroid - b.centroid
    return max(abs(float(diff @ a.normal)), abs(float(diff @ b.normal)))


def _averaged_plane(a: Plane, b: Plane) -> Plane:
    n = a.normal + b.normal
    n = n / np.linalg.norm(n)
    c = 0.5 * (a.centroid + b.centroid)
    if n @ c > 0:
        n = -n
    return Plane(normal=n, centroid=c, inliers=a.inliers + b.inliers)


def classify_and_project(
    seg: Segment2D,
    left: Plane | None,
    right: Plane | None,
    frame: Frame,
    cfg: GeometryConfig = GeometryConfig(),
) -> Line3D | None:
    """Typed 3-D line from a 2-D segment and its side planes; None = rejected."""
    if left is None and right is None:
        raise ValueError("classify_and_project needs at least one plane")
    cam = frame.camera
    ray_s = np.array([(seg.start[0] - cam.cx) / cam.fx, (seg.start[1] - cam.cy) / cam.fy, 1.0])
    ray_e = np.array([(seg.end[0] - cam.cx) / cam.fx, (seg.end[1] - cam.cy) / cam.fy, 1.0])

    if left is None or right is None:
        plane = left if left is not None else right
        line_type = _single_side_type(seg, plane, frame, cfg, missing="right" if right is None else "left")
        p_s = _ray_plane_point(ray_s, plane)
        p_e = _ray_plane_point(ray_e, plane)
        n_l = plane.normal if left is not None else np.zeros(3)
        n_r = plane.normal if right is not None else np.zeros(3)
    elif _coplanar(left, right, cfg):
        plane = _averaged_plane(left, right)
        line_type = "texture"
        p_s = _ray_plane_point(ray_s, plane)
        p_e = _ray_plane_point(ray_e, plane)
        n_l, n_r = left.normal, right.normal
    else:
        inter = None if _separation(left, right) > cfg.separation_threshold_m else _plane_intersection_line(left, right)
        if inter is None:
            # large separation, or parallel planes: depth discontinuity; the
            # line belongs to the surface closer to the camera
            plane = left if left.mean_depth <= right.mean_depth else right
            line_type = "discontinuity"
            p_s = _ray_plane_point(ray_s, plane)
            p_e = _ray_plane_point(ray_e, plane)
        else:
            pt, u = inter
            line_type = "edge"
            p_s = _closest_point_on_line_to_ray(pt, u, ray_s)
            p_e = _closest_point_on_line_to_ray(pt, u, ray_e)
        n_l, n_r = left.normal, right.normal

    if p_s is None or p_e is None:
        return None
    if np.linalg.norm(p_e - p_s) < cfg.min_length_3d_m:
        return None
    if p_s[2] <= 0 or p_e[2] <= 0:
        return None
    return Line3D(p_s=p_s, p_e=p_e, n_l=n_l, n_r=n_r, line_type=line_type)


def _single_side_type(seg, plane: Plane, frame: Frame, cfg: GeometryConfig, missing: str) -> str:
    """Line type when only one side has a plane.

    If the plane-less side has depth readings farther than the line's surface
    by more than the separation threshold, the segment borders a depth jump
    (discontinuity); otherwise it is treated as surface texture.
    """
    from .camera import band_pixel_mask

    mask = band_pixel_mask(seg, missing, cfg.band_width_px, frame.camera.height, frame.camera.width)
    depths = frame.depth[mask & (frame.depth > 0)]
    if depths.size == 0:
        return "texture"
    plane_depth = plane.mean_depth
    if float(depths.mean()) > plane_depth + cfg.separation_threshold_m:
        return "discontinuity"
    return "texture"


def occlusion_flags(frame: Frame, line: Line3D, seg: Segment2D, cfg: GeometryConfig = GeometryConfig()):
    """Per-extremity flags: near the image border, or cut off by a closer object.

    The depth probe samples the depth map a few pixels beyond each extremity
    along the segment's own direction; a reading closer than the line's
    endpoint by more than occ_depth_tol means something occludes the line's
    continuation there.
    """
    cam = frame.camera
    a = np.asarray(seg.start, dtype=np.float64)
    b = np.asarray(seg.end, dtype=np.float64)
    d2 = (b - a) / max(np.linalg.norm(b - a), 1e-12)
    flags = []
    for pix, endpoint_3d, outward in ((a, line.p_s, -d2), (b, line.p_e, d2)):
        if not cam.in_bounds(pix[0], pix[1], margin=cfg.edge_margin_px):
            flags.append(True)
            continue
        probe = pix + outward * cfg.occ_probe_px
        pu, pv = int(round(probe[0])), int(round(probe[1]))
        if pu < 0 or pu >= cam.width or pv < 0 or pv >= cam.height:
            flags.append(True)
            continue
        probe_depth = frame.depth[pv, pu]
        flags.append(bool(probe_depth > 0 and probe_depth < endpoint_3d[2] - cfg.occ_depth_tol_m))
    return flags[0], flags[1]
