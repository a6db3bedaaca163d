"""Per-frame feature extraction.

Ties the 2-D detector to the 3-D stages: detect segments, fit the side
planes, classify and project to typed 3-D lines, set occlusion flags, and
render one small virtual-view image per line.  The result is a fixed-layout
bundle per frame (geometric vectors, images, 2-D endpoints, ground-truth
labels when masks are available) that the learned stages consume.
"""

import json
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Frame, frame_point_cloud
from .dataset import Dataset, load_frame
from .detect import DetectorConfig, Segment2D, extract_lines
from .geometry import (
    GEOM_DIM,
    GeometryConfig,
    classify_and_project,
    fit_side_planes,
    geom_vector,
    occlusion_flags,
)
from .synth import ground_truth_line_labels
from .views import VIRTUAL_HEIGHT, VIRTUAL_WIDTH, virtual_image_for_line

FEATURES_FORMAT_VERSION = 1

LINE_TYPE_IDS = {"discontinuity": 0, "texture": 1, "edge": 2}
LINE_TYPE_NAMES = {v: k for k, v in LINE_TYPE_IDS.items()}


@dataclass(frozen=True)
class ExtractionConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    cloud_stride: int = 2  # full-frame cloud subsampling for virtual views
    dilation_px: int = 2  # virtual-view hole closing radius
    max_lines: int | None = None  # per-frame cap, uniform sample when exceeded
    label_band_px: float = 3.0


def synthetic_preset(max_lines: int | None = None) -> ExtractionConfig:
    """Detector thresholds tuned for the flat-shaded synthetic renderer."""
    return ExtractionConfig(
        detector=DetectorConfig(min_region_size=8, min_length_px=15),
        max_lines=max_lines,
    )


@dataclass
class FrameFeatures:
    """All per-line features of one frame, row-aligned across arrays."""

    frame_id: str
    scene_id: str
    geom: np.ndarray  # [N, 15] float32
    images: np.ndarray  # [N, 64, 96, 3] uint8
    seg2d: np.ndarray  # [N, 4] float32, (u_s, v_s, u_e, v_e)
    line_types: np.ndarray  # [N] int64, LINE_TYPE_IDS
    labels: np.ndarray  # [N] int64 instance labels, 0 = background/unknown
    semantics: np.ndarray  # [N] int64 semantic ids, 0 = unknown

    @property
    def n_lines(self) -> int:
        return int(self.geom.shape[0])


def _empty_features(frame_id: str, scene_id: str) -> FrameFeatures:
    return FrameFeatures(
        frame_id=frame_id,
        scene_id=scene_id,
        geom=np.zeros((0, GEOM_DIM), dtype=np.float32),
        images=np.zeros((0, VIRTUAL_HEIGHT, VIRTUAL_WIDTH, 3), dtype=np.uint8),
        seg2d=np.zeros((0, 4), dtype=np.float32),
        line_types=np.zeros(0, dtype=np.int64),
        labels=np.zeros(0, dtype=np.int64),
        semantics=np.zeros(0, dtype=np.int64),
    )


def frame_rng(seed: int, frame_id: str) -> np.random.Generator:
    """Process-stable per-frame generator (crc32, not the builtin hash)."""
    key = zlib.crc32(frame_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence((seed, key)))


def extract_frame(
    frame: Frame,
    config: ExtractionConfig = ExtractionConfig(),
    seed: int = 0,
    scene_id: str = "",
) -> FrameFeatures:
    """Detect, reconstruct and describe every usable line of one frame."""
    rng = frame_rng(seed, frame.frame_id)
    gray = frame.color.astype(np.float64).mean(axis=2)
    segments = extract_lines(gray, config.detector)
    if not segments:
        return _empty_features(frame.frame_id, scene_id)

    cloud = frame_point_cloud(frame, stride=config.cloud_stride)
    kept_segs: list[Segment2D] = []
    geoms, images, seg2d, types = [], [], [], []
    for seg in segments:
        left, right = fit_side_planes(frame, seg, config.geometry, rng)
        if left is None and right is None:
            continue
        line = classify_and_project(seg, left, right, frame, config.geometry)
        if line is None:
            continue
        line.o_s, line.o_e = occlusion_flags(frame, line, seg, config.geometry)
        geoms.append(geom_vector(line))
        # store the [0, 1] patch as 8-bit; the visual encoder rescales
        img = virtual_image_for_line(line, cloud, config.dilation_px)
        images.append(np.round(img * 255.0).astype(np.uint8))
        seg2d.append([seg.start[0], seg.start[1], seg.end[0], seg.end[1]])
        types.append(LINE_TYPE_IDS[line.line_type])
        kept_segs.append(seg)

    if not kept_segs:
        return _empty_features(frame.frame_id, scene_id)

    if frame.instances is not None and frame.semantics is not None:
        labels, semantics = ground_truth_line_labels(frame, kept_segs, config.label_band_px)
    else:
        labels = np.zeros(len(kept_segs), dtype=np.int64)
        semantics = np.zeros(len(kept_segs), dtype=np.int64)

    feats = FrameFeatures(
        frame_id=frame.frame_id,
        scene_id=scene_id,
        geom=np.asarray(geoms, dtype=np.float32),
        images=np.stack(images),
        seg2d=np.asarray(seg2d, dtype=np.float32),
        line_types=np.asarray(types, dtype=np.int64),
        labels=np.asarray(labels, dtype=np.int64),
        semantics=np.asarray(semantics, dtype=np.int64),
    )
    if config.max_lines is not None and feats.n_lines > config.max_lines:
        keep = np.sort(rng.choice(feats.n_lines, size=config.max_lines, replace=False))
        feats = select_lines(feats, keep)
    return feats


def select_lines(feats: FrameFeatures, idx) -> FrameFeatures:
    idx = np.asarray(idx)
    return FrameFeatures(
        frame_id=feats.frame_id,
        scene_id=feats.scene_id,
        geom=feats.geom[idx],
        images=feats.images[idx],
        seg2d=feats.seg2d[idx],
        line_types=feats.line_types[idx],
        labels=feats.labels[idx],
        semantics=feats.semantics[idx],
    )


# -- persistence ---------------------------------------------------------------


def save_features(path, feats: FrameFeatures):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        path,
        frame_id=np.array(feats.frame_id),
        scene_id=np.array(feats.scene_id),
        geom=feats.geom,
        images=feats.images,
        seg2d=feats.seg2d,
        line_types=feats.line_types,
        labels=feats.labels,
        semantics=feats.semantics,
    )


def load_features(path) -> FrameFeatures:
    with np.load(path) as z:
        return FrameFeatures(
            frame_id=str(z["frame_id"]),
            scene_id=str(z["scene_id"]),
            geom=z["geom"],
            images=z["images"],
            seg2d=z["seg2d"],
            line_types=z["line_types"],
            labels=z["labels"],
            semantics=z["semantics"],
        )


def dump_lines_text(path, feats: FrameFeatures):
    """Human-readable dump, one line per 3-D line."""
    with open(path, "w") as f:
        f.write("# type label semantic  p_s(3) p_e(3) n_l(3) n_r(3) length o_s o_e\n")
        for i in range(feats.n_lines):
            g = feats.geom[i]
            f.write(
                "%s %d %d  " % (LINE_TYPE_NAMES[int(feats.line_types[i])], feats.labels[i], feats.semantics[i])
                + " ".join("%.6f" % v for v in g)
                + "\n"
            )


def _extract_ref(args):
    ref, config, seed = args
    try:
        frame = load_frame(ref)
        return extract_frame(frame, config, seed=seed, scene_id=ref.scene_id), None
    except Exception as e:  # one bad frame must not sink the batch
        return None, f"{type(e).__name__}: {e}"


def extract_dataset(
    ds: Dataset,
    out_dir,
    config: ExtractionConfig = ExtractionConfig(),
    seed: int = 0,
    workers: int | None = None,
) -> Path:
    """Extract every frame of a stored dataset into out_dir.

    Layout: out_dir/features.json plus one compressed bundle per frame at
    out_dir/<scene_id>/<frame_id>.npz.  Results do not depend on the worker
    count: each frame draws from its own seed stream.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if workers is None:
        workers = int(os.environ.get("LINEPLACE_WORKERS", "1"))

    refs = ds.all_frames()
    jobs = [(ref, config, seed) for ref in refs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_extract_ref, jobs, chunksize=1))
    else:
        results = [_extract_ref(j) for j in jobs]

    index: dict = {
        "format_version": FEATURES_FORMAT_VERSION,
        "seed": seed,
        "scenes": {},
        "errors": [],
    }
    for ref, (feats, err) in zip(refs, results):
        if feats is None:
            index["errors"].append(
                {"scene_id": ref.scene_id, "frame_id": ref.frame_id, "error": err}
            )
            continue
        rel = Path(ref.scene_id) / f"{feats.frame_id}.npz"
        save_features(out_dir / rel, feats)
        index["scenes"].setdefault(ref.scene_id, []).append(
            {"frame_id": feats.frame_id, "path": str(rel), "n_lines": feats.n_lines}
        )
    with open(out_dir / "features.json", "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)
    return out_dir


def read_features_index(out_dir) -> dict:
    out_dir = Path(out_dir)
    with open(out_dir / "features.json") as f:
        index = json.load(f)
    if index.get("format_version") != FEATURES_FORMAT_VERSION:
        raise ValueError(f"unsupported features format {index.get('format_version')!r}")
    return index


def load_all_features(out_dir) -> dict:
    """{scene_id: [FrameFeatures, ...]} for a whole extracted dataset."""
    out_dir = Path(out_dir)
    index = read_features_index(out_dir)
    scenes = {}
    for scene_id, entries in sorted(index["scenes"].items()):
        scenes[scene_id] = [load_features(out_dir / e["path"]) for e in entries]
    return scenes
