"""On-disk dataset layout: manifest JSON plus PNG images per frame.

Layout:

    root/dataset.json                  index: format version + scene list
    root/<scene>/scene.json            scene spec, frame records
    root/<scene>/<frame>_color.png     8-bit RGB
    root/<scene>/<frame>_depth.png     16-bit, millimeters (0 = missing)
    root/<scene>/<frame>_instance.png  16-bit instance ids
    root/<scene>/<frame>_semantic.png  16-bit semantic class ids

Poses are stored row-major (16 floats, cam-to-world).  Depth round-trips
exactly up to millimeter quantization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Frame, PinholeCamera
from .synth import FaceTexture, ObjectSpec, SceneSpec

FORMAT_VERSION = 1


def _texture_to_dict(t: FaceTexture) -> dict:
    return {
        "base_color": list(t.base_color),
        "alt_color": list(t.alt_color),
        "stripe_axis": t.stripe_axis,
        "stripe_width": t.stripe_width,
        "stripe_phase": t.stripe_phase,
    }


def _texture_from_dict(d: dict) -> FaceTexture:
    return FaceTexture(
        base_color=tuple(d["base_color"]),
        alt_color=tuple(d["alt_color"]),
        stripe_axis=int(d["stripe_axis"]),
        stripe_width=float(d["stripe_width"]),
        stripe_phase=float(d["stripe_phase"]),
    )


def scene_spec_to_dict(spec: SceneSpec) -> dict:
    return {
        "scene_id": spec.scene_id,
        "seed": spec.seed,
        "room": list(spec.room),
        "wall_faces": [_texture_to_dict(t) for t in spec.wall_faces],
        "objects": [
            {
                "kind": o.kind,
                "instance_id": o.instance_id,
                "semantic_id": o.semantic_id,
                "position": list(o.position),
                "yaw": o.yaw,
                "size": list(o.size),
                "faces": [_texture_to_dict(t) for t in o.faces],
            }
            for o in spec.objects
        ],
    }


def scene_spec_from_dict(d: dict) -> SceneSpec:
    return SceneSpec(
        scene_id=d["scene_id"],
        seed=int(d["seed"]),
        room=tuple(d["room"]),
        wall_faces=tuple(_texture_from_dict(t) for t in d["wall_faces"]),
        objects=tuple(
            ObjectSpec(
                kind=o["kind"],
                instance_id=int(o["instance_id"]),
                semantic_id=int(o["semantic_id"]),
                position=tuple(o["position"]),
                yaw=float(o["yaw"]),
                size=tuple(o["size"]),
                faces=tuple(_texture_from_dict(t) for t in o["faces"]),
            )
            for o in d["objects"]
        ),
    )


@dataclass(frozen=True)
class FrameRef:
    """Pointer to one stored frame; load with load_frame."""

    scene_id: str
    frame_id: str
    scene_dir: Path
    record: dict


@dataclass
class SceneRecord:
    scene_id: str
    spec: SceneSpec | None
    frames: list  # [FrameRef]


@dataclass
class Dataset:
    root: Path
    scenes: list  # [SceneRecord]

    def all_frames(self):
        return [ref for scene in self.scenes for ref in scene.frames]


def _save_png16(path: Path, arr: np.ndarray):
    Image.fromarray(arr.astype(np.uint16), mode="I;16").save(path)


def _load_png16(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint16)


def write_dataset(root, scenes) -> Path:
    """Persist [(SceneSpec, [Frame])] under root; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    index = {"format_version": FORMAT_VERSION, "scenes": []}
    for spec, frames in scenes:
        scene_dir = root / spec.scene_id
        scene_dir.mkdir(exist_ok=True)
        records = []
        for i, frame in enumerate(frames):
            stem = f"f{i:03d}"
            Image.fromarray(frame.color, mode="RGB").save(scene_dir / f"{stem}_color.png")
            depth_mm = np.round(frame.depth * 1000.0).astype(np.uint16)
            _save_png16(scene_dir / f"{stem}_depth.png", depth_mm)
            record = {
                "frame_id": frame.frame_id or f"{spec.scene_id}_{stem}",
                "color": f"{stem}_color.png",
                "depth": f"{stem}_depth.png",
                "pose_cam_to_world": [float(x) for x in frame.pose_cam_to_world.reshape(-1)],
                "intrinsics": frame.camera.to_dict(),
            }
            if frame.instances is not None:
                _save_png16(scene_dir / f"{stem}_instance.png", frame.instances)
                record["instance"] = f"{stem}_instance.png"
            if frame.semantics is not None:
                _save_png16(scene_dir / f"{stem}_semantic.png", frame.semantics)
                record["semantic"] = f"{stem}_semantic.png"
            records.append(record)
        scene_json = {
            "scene_id": spec.scene_id,
            "spec": scene_spec_to_dict(spec),
            "frames": records,
        }
        with open(scene_dir / "scene.json", "w") as f:
            json.dump(scene_json, f, indent=1, sort_keys=True)
        index["scenes"].append({"scene_id": spec.scene_id, "path": spec.scene_id})
    with open(root / "dataset.json", "w") as f:
        json.dump(index, f, indent=1, sort_keys=True)
    return root / "dataset.json"


def read_dataset(root) -> Dataset:
    """Open a dataset directory; frames load lazily via load_frame."""
    root = Path(root)
    manifest = root / "dataset.json"
    if not manifest.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    with open(manifest) as f:
        index = json.load(f)
    if index.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {index.get('format_version')!r}")
    scenes = []
    for entry in index["scenes"]:
        scene_dir = root / entry["path"]
        with open(scene_dir / "scene.json") as f:
            scene_json = json.load(f)
        spec = scene_spec_from_dict(scene_json["spec"]) if "spec" in scene_json else None
        refs = [
            FrameRef(
                scene_id=scene_json["scene_id"],
                frame_id=rec["frame_id"],
                scene_dir=scene_dir,
                record=rec,
            )
            for rec in scene_json["frames"]
        ]
        scenes.append(SceneRecord(scene_id=scene_json["scene_id"], spec=spec, frames=refs))
    return Dataset(root=root, scenes=scenes)


def load_frame(ref: FrameRef) -> Frame:
    rec = ref.record
    color = np.asarray(Image.open(ref.scene_dir / rec["color"]), dtype=np.uint8)
    depth = _load_png16(ref.scene_dir / rec["depth"]).astype(np.float64) / 1000.0
    camera = PinholeCamera.from_dict(rec["intrinsics"])
    instances = _load_png16(ref.scene_dir / rec["instance"]) if "instance" in rec else None
    semantics = _load_png16(ref.scene_dir / rec["semantic"]) if "semantic" in rec else None
    return Frame(
        color=color,
        depth=depth,
        camera=camera,
        pose_cam_to_world=np.array(rec["pose_cam_to_world"], dtype=np.float64).reshape(4, 4),
        instances=instances,
        semantics=semantics,
        frame_id=rec["frame_id"],
    )
