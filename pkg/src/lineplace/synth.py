"""Synthetic desk-scale RGB-D scenes with exact depth and ground-truth masks.

A scene is a rectangular room containing a handful of striped convex objects
(crates, slabs, pillars, wedges) standing on the floor.  Frames are rendered
by raycasting convex polytopes: flat albedo shading, exact z-depth, and
per-pixel instance/semantic ids.  Stripe textures on every face guarantee
texture lines in addition to the geometric edge and discontinuity lines.

World frame: z up, room corner at the origin.  Camera frame: x right,
y down, z forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Frame, PinholeCamera

# semantic class ids
SEM_FLOOR = 1
SEM_WALL = 2
SEM_CEILING = 3
SEM_CRATE = 10
SEM_SLAB = 11
SEM_PILLAR = 12
SEM_WEDGE = 13
BACKGROUND_SEMANTICS = frozenset({SEM_FLOOR, SEM_WALL, SEM_CEILING})

BACKGROUND_LABEL = 0

PALETTE = np.array(
    [
        [0.83, 0.22, 0.18],
        [0.16, 0.42, 0.72],
        [0.22, 0.62, 0.28],
        [0.91, 0.68, 0.13],
        [0.52, 0.28, 0.58],
        [0.12, 0.66, 0.64],
        [0.78, 0.45, 0.22],
        [0.35, 0.35, 0.38],
        [0.88, 0.85, 0.80],
        [0.55, 0.71, 0.25],
        [0.25, 0.25, 0.60],
        [0.70, 0.30, 0.45],
    ]
)

OBJECT_KINDS = ("crate", "slab", "pillar", "wedge")
KIND_SEMANTIC = {"crate": SEM_CRATE, "slab": SEM_SLAB, "pillar": SEM_PILLAR, "wedge": SEM_WEDGE}


@dataclass(frozen=True)
class FaceTexture:
    base_color: tuple
    alt_color: tuple
    stripe_axis: int  # 0 or 1: which face tangent carries the stripes
    stripe_width: float  # meters
    stripe_phase: float  # [0, 1)


@dataclass(frozen=True)
class ObjectSpec:
    kind: str
    instance_id: int
    semantic_id: int
    position: tuple  # (x, y) base center on the floor
    yaw: float
    size: tuple  # (sx, sy, sz)
    faces: tuple  # FaceTexture per polytope face


@dataclass(frozen=True)
class SceneSpec:
    scene_id: str
    seed: int
    room: tuple  # (Lx, Ly, Lz)
    wall_faces: tuple  # 6 FaceTexture: floor, ceiling, x=0, x=Lx, y=0, y=Ly
    objects: tuple


@dataclass(frozen=True)
class SynthConfig:
    n_objects_min: int = 6
    n_objects_max: int = 12
    room_xy_min: float = 3.0
    room_xy_max: float = 4.2
    room_z_min: float = 2.4
    room_z_max: float = 2.8
    min_spacing: float = 0.10  # between inflated object AABBs, meters
    stripe_width_min: float = 0.05  # object faces: fine stripes, many texture lines
    stripe_width_max: float = 0.13
    wall_stripe_width_min: float = 0.35  # walls: coarse stripes, few background lines
    wall_stripe_width_max: float = 0.70
    view_distance_min: float = 1.0  # camera orbit radius around the view target
    view_distance_max: float = 2.2
    image_width: int = 320
    image_height: int = 240
    hfov_deg: float = 60.0
    max_pose_retries: int = 500
    placement_retries: int = 200

    def camera(self) -> PinholeCamera:
        f = (self.image_width / 2.0) / np.tan(np.deg2rad(self.hfov_deg) / 2.0)
        return PinholeCamera(
            fx=f,
            fy=f,
            cx=(self.image_width - 1) / 2.0,
            cy=(self.image_height - 1) / 2.0,
            width=self.image_width,
            height=self.image_height,
        )


def _random_texture(rng: np.random.Generator, cfg: SynthConfig, wall: bool = False) -> FaceTexture:
    while True:
        i, j = rng.integers(0, len(PALETTE), size=2)
        if i != j and np.abs(PALETTE[i] - PALETTE[j]).sum() >= 0.5:
            break
    lo, hi = (
        (cfg.wall_stripe_width_min, cfg.wall_stripe_width_max)
        if wall
        else (cfg.stripe_width_min, cfg.stripe_width_max)
    )
    return FaceTexture(
        base_color=tuple(PALETTE[i]),
        alt_color=tuple(PALETTE[j]),
        stripe_axis=int(rng.integers(0, 2)),
        stripe_width=float(rng.uniform(lo, hi)),
        stripe_phase=float(rng.uniform(0.0, 1.0)),
    )


_KIND_SIZE_RANGES = {
    "crate": ((0.30, 0.55), (0.30, 0.55), (0.25, 0.50)),
    "slab": ((0.55, 0.95), (0.40, 0.70), (0.08, 0.16)),
    "pillar": ((0.16, 0.30), (0.16, 0.30), (0.75, 1.30)),
    "wedge": ((0.35, 0.65), (0.30, 0.60), (0.25, 0.45)),
}

_KIND_FACE_COUNT = {"crate": 6, "slab": 6, "pillar": 6, "wedge": 5}


def generate_scene(seed: int, config: SynthConfig = SynthConfig(), scene_id: str | None = None) -> SceneSpec:
    """Deterministic scene layout: room, wall textures, non-overlapping objects."""
    rng = np.random.default_rng(seed)
    room = (
        float(rng.uniform(config.room_xy_min, config.room_xy_max)),
        float(rng.uniform(config.room_xy_min, config.room_xy_max)),
        float(rng.uniform(config.room_z_min, config.room_z_max)),
    )
    wall_faces = tuple(_random_texture(rng, config, wall=True) for _ in range(6))
    n_objects = int(rng.integers(config.n_objects_min, config.n_objects_max + 1))
    objects = []
    placed_aabbs = []
    instance_id = 7  # 1..6 reserved for floor/ceiling/walls
    for _ in range(n_objects):
        for _ in range(config.placement_retries):
            kind = OBJECT_KINDS[int(rng.integers(0, len(OBJECT_KINDS)))]
            ranges = _KIND_SIZE_RANGES[kind]
            size = tuple(float(rng.uniform(lo, hi)) for lo, hi in ranges)
            # keep objects loosely grouped near the room center so several
            # fall into a typical camera view together
            margin = 0.5 * float(np.hypot(size[0], size[1])) + 0.2
            spread = 0.30
            px = float(np.clip(rng.normal(room[0] / 2, spread * room[0] / 2), margin, room[0] - margin))
            py = float(np.clip(rng.normal(room[1] / 2, spread * room[1] / 2), margin, room[1] - margin))
            yaw = float(rng.uniform(0.0, 2.0 * np.pi))
            half_diag = 0.5 * float(np.hypot(size[0], size[1]))
            aabb = (px - half_diag, px + half_diag, py - half_diag, py + half_diag)
            pad = config.min_spacing
            if all(
                aabb[1] + pad <= a[0] or a[1] + pad <= aabb[0] or aabb[3] + pad <= a[2] or a[3] + pad <= aabb[2]
                for a in placed_aabbs
            ):
                placed_aabbs.append(aabb)
                faces = tuple(_random_texture(rng, config) for _ in range(_KIND_FACE_COUNT[kind]))
                objects.append(
                    ObjectSpec(
                        kind=kind,
                        instance_id=instance_id,
                        semantic_id=KIND_SEMANTIC[kind],
                        position=(px, py),
                        yaw=yaw,
                        size=size,
                        faces=faces,
                    )
                )
                instance_id += 1
                break
        # placement failure for one object is tolerated; the scene just gets fewer
    return SceneSpec(
        scene_id=scene_id if scene_id is not None else f"scene_{seed:06d}",
        seed=seed,
        room=room,
        wall_faces=wall_faces,
        objects=tuple(objects),
    )


# -- polytope geometry --------------------------------------------------------


@dataclass
class _Polytope:
    """Convex solid as intersection of halfspaces n . x <= d, with textures."""

    normals: np.ndarray  # [F, 3] outward
    offsets: np.ndarray  # [F]
    faces: tuple  # FaceTexture per face
    instance_id: int
    semantic_ids: tuple  # per-face semantic id
    enclosure: bool = False  # True for the room: camera inside, hit = exit


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _object_polytope(obj: ObjectSpec) -> _Polytope:
    sx, sy, sz = obj.size
    r = _yaw_matrix(obj.yaw)
    center = np.array([obj.position[0], obj.position[1], 0.0])
    if obj.kind == "wedge":
        # triangular prism: vertical back at local x = -sx/2, slope down to +sx/2
        slope = np.array([sz, 0.0, sx]) / np.hypot(sz, sx)
        locals_ = [
            (np.array([0.0, 0.0, -1.0]), 0.0),
            (np.array([-1.0, 0.0, 0.0]), sx / 2),
            (slope, float(slope @ np.array([sx / 2, 0.0, 0.0]))),
            (np.array([0.0, -1.0, 0.0]), sy / 2),
            (np.array([0.0, 1.0, 0.0]), sy / 2),
        ]
    else:
        locals_ = [
            (np.array([0.0, 0.0, -1.0]), 0.0),
            (np.array([0.0, 0.0, 1.0]), sz),
            (np.array([-1.0, 0.0, 0.0]), sx / 2),
            (np.array([1.0, 0.0, 0.0]), sx / 2),
            (np.array([0.0, -1.0, 0.0]), sy / 2),
            (np.array([0.0, 1.0, 0.0]), sy / 2),
        ]
    normals = np.stack([r @ n for n, _ in locals_])
    offsets = np.array([d + n_world @ center for n_world, (_, d) in zip(normals, locals_)])
    return _Polytope(
        normals=normals,
        offsets=offsets,
        faces=obj.faces,
        instance_id=obj.instance_id,
        semantic_ids=tuple([obj.semantic_id] * len(locals_)),
        enclosure=False,
    )


def _room_polytope(spec: SceneSpec) -> _Polytope:
    lx, ly, lz = spec.room
    # order matches spec.wall_faces: floor, ceiling, x=0, x=Lx, y=0, y=Ly
    normals = np.array(
        [
            [0.0, 0.0, -1.0],
            [0.0, 0.0, 1.0],
            [-1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 1.0, 0.0],
        ]
    )
    offsets = np.array([0.0, lz, 0.0, lx, 0.0, ly])
    semantics = (SEM_FLOOR, SEM_CEILING, SEM_WALL, SEM_WALL, SEM_WALL, SEM_WALL)
    return _Polytope(
        normals=normals,
        offsets=offsets,
        faces=spec.wall_faces,
        instance_id=0,  # per-face instance ids 1..6 assigned at shading time
        semantic_ids=semantics,
        enclosure=True,
    )


def _face_tangents(normal: np.ndarray):
    up = np.array([0.0, 0.0, 1.0])
    if abs(normal @ up) > 0.9:
        t1 = np.array([1.0, 0.0, 0.0])
    else:
        t1 = np.cross(normal, up)
        t1 = t1 / np.linalg.norm(t1)
    t2 = np.cross(normal, t1)
    return t1, t2


def _raycast_polytope(poly: _Polytope, origin: np.ndarray, dirs: np.ndarray):
    """(t, face_index) per ray; t = inf for misses.

    Entry hit for solids; exit hit for the enclosing room.
    """
    n_rays = len(dirs)
    t_lo = np.full(n_rays, -np.inf)
    t_hi = np.full(n_rays, np.inf)
    f_lo = np.full(n_rays, -1, dtype=np.int32)
    f_hi = np.full(n_rays, -1, dtype=np.int32)
    alive = np.ones(n_rays, dtype=bool)
    for fi, (n, d) in enumerate(zip(poly.normals, poly.offsets)):
        denom = dirs @ n
        num = d - origin @ n
        entering = denom < 0
        exiting = denom > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        upd = entering & (t > t_lo)
        t_lo[upd] = t[upd]
        f_lo[upd] = fi
        upd = exiting & (t < t_hi)
        t_hi[upd] = t[upd]
        f_hi[upd] = fi
        alive &= entering | exiting | (num >= 0)
    if poly.enclosure:
        hit = alive & (t_hi > 1e-9) & np.isfinite(t_hi)
        t_out = np.where(hit, t_hi, np.inf)
        return t_out, np.where(hit, f_hi, -1)
    hit = alive & (t_lo <= t_hi) & (t_lo > 1e-9)
    t_out = np.where(hit, t_lo, np.inf)
    return t_out, np.where(hit, f_lo, -1)


def _shade(points, texture: FaceTexture, normal):
    t1, t2 = _face_tangents(normal)
    axis = (t1, t2)[texture.stripe_axis]
    coord = points @ axis / texture.stripe_width + texture.stripe_phase
    stripe = np.floor(coord).astype(np.int64) % 2
    base = np.asarray(texture.base_color)
    alt = np.asarray(texture.alt_color)
    return np.where(stripe[:, None] == 0, base, alt)


def look_at_pose(eye: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Roll-free cam-to-world pose: camera x right, y down, z toward target."""
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    up_world = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up_world)
    norm = np.linalg.norm(right)
    if norm < 1e-6:
        raise ValueError("camera forward is vertical; roll-free pose undefined")
    right = right / norm
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = forward
    pose[:3, 3] = eye
    return pose


def render_frame(spec: SceneSpec, pose_cam_to_world: np.ndarray, camera: PinholeCamera, frame_id: str = "") -> Frame:
    """Raycast one view: color, exact depth, instance and semantic masks."""
    h, w = camera.height, camera.width
    v, u = np.mgrid[0:h, 0:w]
    dirs_cam = np.stack(
        [
            (u.ravel() - camera.cx) / camera.fx,
            (v.ravel() - camera.cy) / camera.fy,
            np.ones(h * w),
        ],
        axis=-1,
    )
    r = pose_cam_to_world[:3, :3]
    eye = pose_cam_to_world[:3, 3]
    dirs = dirs_cam @ r.T

    polys = [_room_polytope(spec)] + [_object_polytope(o) for o in spec.objects]
    n_rays = h * w
    best_t = np.full(n_rays, np.inf)
    best_poly = np.full(n_rays, -1, dtype=np.int32)
    best_face = np.full(n_rays, -1, dtype=np.int32)
    for pi, poly in enumerate(polys):
        t, face = _raycast_polytope(poly, eye, dirs)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_poly[closer] = pi
        best_face[closer] = face[closer]

    if not np.isfinite(best_t).all():
        raise RuntimeError("ray escaped the room; scene geometry is inconsistent")

    points = eye + best_t[:, None] * dirs
    color = np.zeros((n_rays, 3))
    instance = np.zeros(n_rays, dtype=np.uint16)
    semantic = np.zeros(n_rays, dtype=np.uint16)
    for pi, poly in enumerate(polys):
        for fi in range(len(poly.normals)):
            sel = (best_poly == pi) & (best_face == fi)
            if not sel.any():
                continue
            color[sel] = _shade(points[sel], poly.faces[fi], poly.normals[fi])
            if poly.enclosure:
                instance[sel] = fi + 1  # floor=1, ceiling=2, walls=3..6
            else:
                instance[sel] = poly.instance_id
            semantic[sel] = poly.semantic_ids[fi]

    depth = best_t.reshape(h, w)  # dirs_cam z-component is 1, so t is z-depth
    return Frame(
        color=(np.clip(color, 0.0, 1.0).reshape(h, w, 3) * 255.0).round().astype(np.uint8),
        depth=depth,
        camera=camera,
        pose_cam_to_world=pose_cam_to_world,
        instances=instance.reshape(h, w),
        semantics=semantic.reshape(h, w),
        frame_id=frame_id,
    )


def sample_camera_pose(spec: SceneSpec, rng: np.random.Generator, config: SynthConfig) -> np.ndarray:
    """Random viewpoint in free space looking into the scene."""
    lx, ly, lz = spec.room
    aabbs = []
    for o in spec.objects:
        half = 0.5 * float(np.hypot(o.size[0], o.size[1])) + 0.15
        aabbs.append((o.position[0] - half, o.position[0] + half, o.position[1] - half, o.position[1] + half, o.size[2] + 0.15))
    for _ in range(config.max_pose_retries):
        # target an object most of the time, then orbit the camera around it
        if spec.objects and rng.uniform() < 0.85:
            obj = spec.objects[int(rng.integers(0, len(spec.objects)))]
            target = np.array([obj.position[0], obj.position[1], 0.5 * obj.size[2]])
        else:
            target = np.array([lx / 2, ly / 2, 0.5])
        target = target + rng.uniform(-0.2, 0.2, size=3)
        target[2] = np.clip(target[2], 0.1, lz - 0.4)
        radius = rng.uniform(config.view_distance_min, config.view_distance_max)
        azimuth = rng.uniform(0.0, 2.0 * np.pi)
        eye = np.array(
            [
                target[0] + radius * np.cos(azimuth),
                target[1] + radius * np.sin(azimuth),
                rng.uniform(1.1, min(1.9, lz - 0.3)),
            ]
        )
        if not (0.3 <= eye[0] <= lx - 0.3 and 0.3 <= eye[1] <= ly - 0.3):
            continue
        if any(a[0] <= eye[0] <= a[1] and a[2] <= eye[1] <= a[3] and eye[2] <= a[4] for a in aabbs):
            continue
        forward = target - eye
        forward = forward / np.linalg.norm(forward)
        if abs(forward[2]) > 0.6:
            continue
        return look_at_pose(eye, target)
    raise RuntimeError(f"no valid camera pose found in {config.max_pose_retries} tries")


def render_views(spec: SceneSpec, n_views: int, seed: int, config: SynthConfig = SynthConfig()) -> list[Frame]:
    """n_views frames of a scene from random valid viewpoints; deterministic."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    camera = config.camera()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    frames = []
    for i in range(n_views):
        pose = sample_camera_pose(spec, rng, config)
        frames.append(render_frame(spec, pose, camera, frame_id=f"{spec.scene_id}_f{i:03d}"))
    return frames


# -- ground-truth line labels --------------------------------------------------


def ground_truth_line_labels(frame: Frame, segments, band_px: float = 3.0):
    """Majority-vote instance label and semantic class for each 2-D segment.

    Votes come from the instance mask within a +/- band_px perpendicular band
    around the segment.  Instances whose semantic class is a background class
    (walls, floor, ceiling) collapse to BACKGROUND_LABEL.  Ties break toward
    the smaller instance id.  Returns (labels, semantics) arrays.
    """
    if frame.instances is None or frame.semantics is None:
        raise ValueError("ground-truth labels need instance and semantic masks")
    h, w = frame.instances.shape
    labels = np.zeros(len(segments), dtype=np.int64)
    semantics = np.zeros(len(segments), dtype=np.int64)
    for si, seg in enumerate(segments):
        a = np.asarray(seg.start, dtype=np.float64)
        b = np.asarray(seg.end, dtype=np.float64)
        d = b - a
        length = np.linalg.norm(d)
        d = d / length
        lo_u = max(int(np.floor(min(a[0], b[0]) - band_px)), 0)
        hi_u = min(int(np.ceil(max(a[0], b[0]) + band_px)), w - 1)
        lo_v = max(int(np.floor(min(a[1], b[1]) - band_px)), 0)
        hi_v = min(int(np.ceil(max(a[1], b[1]) + band_px)), h - 1)
        if hi_u < lo_u or hi_v < lo_v:
            continue
        vv, uu = np.mgrid[lo_v : hi_v + 1, lo_u : hi_u + 1]
        rel_u = uu - a[0]
        rel_v = vv - a[1]
        along = rel_u * d[0] + rel_v * d[1]
        perp = np.abs(d[0] * rel_v - d[1] * rel_u)
        sel = (along >= 0) & (along <= length) & (perp <= band_px)
        if not sel.any():
            continue
        inst = frame.instances[lo_v : hi_v + 1, lo_u : hi_u + 1][sel]
        sem = frame.semantics[lo_v : hi_v + 1, lo_u : hi_u + 1][sel]
        ids, counts = np.unique(inst, return_counts=True)
        winner = ids[np.argmax(counts)]  # np.unique sorts ids: ties -> smaller id
        sem_winner = np.bincount(sem[inst == winner].astype(np.int64)).argmax()
        if int(sem_winner) in BACKGROUND_SEMANTICS:
            labels[si] = BACKGROUND_LABEL
        else:
            labels[si] = int(winner)
        semantics[si] = int(sem_winner)
    return labels, semantics
