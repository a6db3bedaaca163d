"""2-D line segment detection by gradient-orientation region growing.

The detector follows the LSD recipe in outline: image gradients from a 2x2
operator, greedy growth of connected regions of pixels sharing a gradient
orientation (polarity kept, so the two sides of a dark/bright stripe stay
separate regions), a rectangular approximation of each region, and a
density check that discards non-line-like blobs.  Co-linear fragments are
fused afterwards and short segments dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Segment2D:
    """Sub-pixel 2-D segment. start/end are (u, v) = (column, row)."""

    start: tuple
    end: tuple

    @property
    def length(self) -> float:
        return float(np.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1]))

    @property
    def direction(self) -> np.ndarray:
        d = np.asarray(self.end, dtype=np.float64) - np.asarray(self.start, dtype=np.float64)
        return d / np.linalg.norm(d)

    def canonical(self) -> "Segment2D":
        """Endpoint order normalized: larger v second (larger u breaks ties)."""
        (u1, v1), (u2, v2) = self.start, self.end
        if (v2, u2) >= (v1, u1):
            return self
        return Segment2D(self.end, self.start)


@dataclass(frozen=True)
class DetectorConfig:
    gradient_threshold: float = 5.0  # min gradient magnitude (intensity/px)
    angle_tol_deg: float = 22.5  # orientation agreement during growth
    min_region_size: int = 20  # pixels per region
    min_length_px: float = 25.0
    fusion_angle_tol_deg: float = 3.0
    fusion_gap_tol_px: float = 5.0
    min_density: float = 0.5  # aligned pixels per rectangle area

    def __post_init__(self):
        for name in ("gradient_threshold", "angle_tol_deg", "min_region_size",
                     "fusion_angle_tol_deg", "fusion_gap_tol_px"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.min_length_px < 0:
            raise ValueError("min_length_px must be >= 0")


def image_gradients(gray: np.ndarray):
    """2x2 gradient operator; returns (gx, gy, magnitude) of shape [H-1, W-1]."""
    g = np.asarray(gray, dtype=np.float64)
    gx = 0.5 * (g[:-1, 1:] - g[:-1, :-1] + g[1:, 1:] - g[1:, :-1])
    gy = 0.5 * (g[1:, :-1] - g[:-1, :-1] + g[1:, 1:] - g[:-1, 1:])
    return gx, gy, np.hypot(gx, gy)


def _angle_diff(a, b):
    """Absolute difference of angles, wrapped to [0, pi] (polarity kept mod 2*pi)."""
    d = np.abs(a - b) % (2.0 * np.pi)
    return np.minimum(d, 2.0 * np.pi - d)


def detect_segments(gray: np.ndarray, cfg: DetectorConfig = DetectorConfig()) -> list[Segment2D]:
    """Detect line segments; result sorted by descending length, deterministic.

    Unfused, unfiltered raw rectangles; callers chain fuse_colinear and
    filter_short (see extract_lines).
    """
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2 or gray.size == 0:
        raise ValueError("detect_segments expects a non-empty 2-D intensity image")
    gx, gy, mag = image_gradients(gray)
    angle = np.arctan2(gy, gx)
    h, w = mag.shape
    usable = mag > cfg.gradient_threshold
    if not usable.any():
        return []

    # seeds in descending magnitude order; region growing is greedy BFS over
    # 8-neighbors whose orientation agrees with the running region mean
    tol = np.deg2rad(cfg.angle_tol_deg)
    order = np.argsort(-mag, axis=None, kind="stable")
    used = ~usable  # treat low-gradient pixels as consumed
    segments = []
    neigh = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    for idx in order:
        sy, sx = divmod(int(idx), w)
        if used[sy, sx]:
            continue
        region = [(sy, sx)]
        used[sy, sx] = True
        sum_cos = np.cos(angle[sy, sx])
        sum_sin = np.sin(angle[sy, sx])
        head = 0
        while head < len(region):
            cy, cx = region[head]
            head += 1
            region_angle = np.arctan2(sum_sin, sum_cos)
            for dy, dx in neigh:
                ny, nx = cy + dy, cx + dx
                if ny < 0 or ny >= h or nx < 0 or nx >= w or used[ny, nx]:
                    continue
                if _angle_diff(angle[ny, nx], region_angle) <= tol:
                    used[ny, nx] = True
                    region.append((ny, nx))
                    sum_cos += np.cos(angle[ny, nx])
                    sum_sin += np.sin(angle[ny, nx])
        if len(region) < cfg.min_region_size:
            continue
        seg = _region_to_segment(region, mag, cfg)
        if seg is not None:
            segments.append(seg)
    segments.sort(key=lambda s: -s.length)
    return segments


def _region_to_segment(region, mag, cfg) -> Segment2D | None:
    """Magnitude-weighted rectangular approximation of a pixel region."""
    ys = np.array([p[0] for p in region], dtype=np.float64)
    xs = np.array([p[1] for p in region], dtype=np.float64)
    # gradient pixel (y, x) sits between image pixels: center at (+0.5, +0.5)
    ys += 0.5
    xs += 0.5
    wts = mag[ys.astype(int), xs.astype(int)]
    wsum = wts.sum()
    cx = (xs * wts).sum() / wsum
    cy = (ys * wts).sum() / wsum
    dx = xs - cx
    dy = ys - cy
    sxx = (wts * dx * dx).sum() / wsum
    syy = (wts * dy * dy).sum() / wsum
    sxy = (wts * dx * dy).sum() / wsum
    cov = np.array([[sxx, sxy], [sxy, syy]])
    evals, evecs = np.linalg.eigh(cov)
    axis = evecs[:, 1]  # main direction (largest eigenvalue)
    t = dx * axis[0] + dy * axis[1]
    n = -dx * axis[1] + dy * axis[0]
    length = t.max() - t.min()
    width = max(n.max() - n.min(), 1.0)
    if length <= 0:
        return None
    density = len(region) / (length * width)
    if density < cfg.min_density:
        return None
    p1 = (cx + t.min() * axis[0], cy + t.min() * axis[1])
    p2 = (cx + t.max() * axis[0], cy + t.max() * axis[1])
    return Segment2D(p1, p2).canonical()


# -- fusion and filtering ----------------------------------------------------

PERP_OFFSET_TOL_PX = 2.0  # colinearity: max endpoint distance to the other line


def _mergeable(a: Segment2D, b: Segment2D, angle_tol_rad: float, gap_tol: float) -> bool:
    da, db = a.direction, b.direction
    cosang = abs(float(da @ db))
    if np.arccos(min(cosang, 1.0)) > angle_tol_rad:
        return False
    # perpendicular offsets of each endpoint from the other infinite line
    for s, t in ((a, b), (b, a)):
        anchor = np.asarray(s.start, dtype=np.float64)
        d = s.direction
        for p in (t.start, t.end):
            rel = np.asarray(p, dtype=np.float64) - anchor
            if abs(d[0] * rel[1] - d[1] * rel[0]) > PERP_OFFSET_TOL_PX:
                return False
    ends_a = (np.asarray(a.start, dtype=np.float64), np.asarray(a.end, dtype=np.float64))
    ends_b = (np.asarray(b.start, dtype=np.float64), np.asarray(b.end, dtype=np.float64))
    gap = min(np.linalg.norm(pa - pb) for pa in ends_a for pb in ends_b)
    return gap <= gap_tol


def _merge(a: Segment2D, b: Segment2D) -> Segment2D:
    pts = [np.asarray(p, dtype=np.float64) for p in (a.start, a.end, b.start, b.end)]
    best = max(
        ((i, j) for i in range(4) for j in range(i + 1, 4)),
        key=lambda ij: np.linalg.norm(pts[ij[0]] - pts[ij[1]]),
    )
    return Segment2D(tuple(pts[best[0]]), tuple(pts[best[1]])).canonical()


def fuse_colinear(segments, angle_tol_deg: float = 3.0, gap_tol_px: float = 5.0) -> list[Segment2D]:
    """Fuse co-linear segments with close extremities, transitively to fixpoint."""
    if angle_tol_deg <= 0 or gap_tol_px <= 0:
        raise ValueError("fusion tolerances must be positive")
    tol = np.deg2rad(angle_tol_deg)
    out = list(segments)
    changed = True
    while changed:
        changed = False
        i = 0
        while i < len(out):
            j = i + 1
            while j < len(out):
                if _mergeable(out[i], out[j], tol, gap_tol_px):
                    out[i] = _merge(out[i], out[j])
                    del out[j]
                    changed = True
                else:
                    j += 1
            i += 1
    return out


def filter_short(segments, min_length_px: float) -> list[Segment2D]:
    """Keep segments with length >= min_length_px."""
    if min_length_px < 0:
        raise ValueError("min_length_px must be >= 0")
    return [s for s in segments if s.length >= min_length_px]


def extract_lines(gray: np.ndarray, cfg: DetectorConfig = DetectorConfig()) -> list[Segment2D]:
    """Full 2-D stage: detect, fuse co-linear fragments, drop short segments."""
    segs = detect_segments(gray, cfg)
    segs = fuse_colinear(segs, cfg.fusion_angle_tol_deg, cfg.fusion_gap_tol_px)
    segs = filter_short(segs, cfg.min_length_px)
    segs.sort(key=lambda s: -s.length)
    return segs


# -- import/export ------------------------------------------------------------


def import_segments(path, width: int | None = None, height: int | None = None) -> list[Segment2D]:
    """Read segments from text, one "x1,y1,x2,y2" per line; validates bounds."""
    segments = []
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            raw = raw.strip()
            if not raw or raw.startswith("#"):
                continue
            parts = raw.split(",")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 comma-separated values, got {len(parts)}")
            try:
                x1, y1, x2, y2 = (float(p) for p in parts)
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
            for x, y in ((x1, y1), (x2, y2)):
                if x < 0 or y < 0:
                    raise ValueError(f"{path}:{lineno}: endpoint ({x}, {y}) out of bounds")
                if width is not None and x > width - 1:
                    raise ValueError(f"{path}:{lineno}: endpoint ({x}, {y}) out of bounds")
                if height is not None and y > height - 1:
                    raise ValueError(f"{path}:{lineno}: endpoint ({x}, {y}) out of bounds")
            if x1 == x2 and y1 == y2:
                raise ValueError(f"{path}:{lineno}: zero-length segment")
            segments.append(Segment2D((x1, y1), (x2, y2)))
    return segments


def export_segments(path, segments):
    """Inverse of import_segments."""
    with open(path, "w") as f:
        for s in segments:
            f.write(f"{s.start[0]},{s.start[1]},{s.end[0]},{s.end[1]}\n")
