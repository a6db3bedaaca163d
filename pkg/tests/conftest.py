"""Shared fixtures: synthetic frames, fake line features, rendered mini-scenes.

The heavier fixtures (rendered scene, extracted features) are session-scoped
so the integration-level tests share one render.  Acceptance tests report a
per-criterion PASS/FAIL line through the terminal-summary hook below.
"""

from __future__ import annotations

import numpy as np
import pytest

from lineplace.camera import Frame, PinholeCamera
from lineplace.extraction import FrameFeatures, synthetic_preset, extract_frame
from lineplace.synth import SynthConfig, generate_scene, render_views


def small_camera(width: int = 80, height: int = 60) -> PinholeCamera:
    return PinholeCamera(fx=70.0, fy=70.0, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                         width=width, height=height)


def flat_frame(depth_value: float = 2.0, width: int = 80, height: int = 60,
               gray: int = 128) -> Frame:
    """Wall parallel to the image plane at constant z, uniform color."""
    cam = small_camera(width, height)
    return Frame(
        color=np.full((height, width, 3), gray, dtype=np.uint8),
        depth=np.full((height, width), depth_value, dtype=np.float64),
        camera=cam,
        pose_cam_to_world=np.eye(4),
        frame_id="flat",
    )


def fake_frame(seed: int, n_lines: int, labels=None, scene_id: str = "s0",
              frame_id: str | None = None, semantics=None) -> FrameFeatures:
    """Random line features, shaped like extractor output, for network tests."""
    rng = np.random.default_rng(seed)
    if labels is None:
        labels = rng.integers(0, 4, size=n_lines)
    labels = np.asarray(labels, dtype=np.int64)
    if semantics is None:
        semantics = np.where(labels == 0, 2, 10 + labels % 3).astype(np.int64)
    return FrameFeatures(
        frame_id=frame_id or f"{scene_id}_f{seed:03d}",
        scene_id=scene_id,
        geom=rng.normal(size=(n_lines, 15)).astype(np.float32),
        images=rng.integers(0, 256, size=(n_lines, 64, 96, 3), dtype=np.uint8),
        seg2d=np.zeros((n_lines, 4), dtype=np.float32),
        line_types=rng.integers(0, 3, size=n_lines).astype(np.int64),
        labels=labels,
        semantics=np.asarray(semantics, dtype=np.int64),
    )


@pytest.fixture(scope="session")
def mini_scene():
    """One generated scene spec plus three rendered views."""
    spec = generate_scene(7, SynthConfig(), scene_id="mini")
    frames = render_views(spec, 3, seed=7)
    return spec, frames


@pytest.fixture(scope="session")
def mini_features(mini_scene):
    """Extracted features of the mini scene's first two views."""
    _, frames = mini_scene
    cfg = synthetic_preset()
    return [extract_frame(f, cfg, seed=0, scene_id="mini") for f in frames[:2]]


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE_LINES = {
    "test_c01_gradient_suite": "acceptance 01 gradient-suite",
    "test_c02_loss_oracles": "acceptance 02 loss-oracles",
    "test_c03_symmetry_suite": "acceptance 03 symmetry-suite",
    "test_c04_geometry_suite": "acceptance 04 geometry-suite",
    "test_c05_virtual_view_invariance": "acceptance 05 virtual-view-invariance",
    "test_c06_clustering_training_analogue": "acceptance 06 clustering-analogue",
    "test_c07_place_recognition": "acceptance 07 place-recognition",
    "test_c08_retrieval_exactness": "acceptance 08 retrieval-exactness",
    "test_c09_nmi_oracle": "acceptance 09 nmi-oracle",
    "test_c10_determinism": "acceptance 10 determinism",
}


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = getattr(rep, "location", (None, None, ""))[2]
            base = name.split("[")[0]
            if base in ACCEPTANCE_LINES:
                verdict = "PASS" if outcome == "passed" else outcome.upper().replace("PASSED", "PASS")
                if outcome != "passed":
                    verdict = "FAIL" if outcome in ("failed", "error") else "SKIP"
                lines.append((base, f"{ACCEPTANCE_LINES[base]}: {verdict}"))
    if lines:
        terminalreporter.write_line("")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
