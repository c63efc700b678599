import numpy as np
import pytest

from flowtrack import kernels
from flowtrack.background import ThresholdParams, estimate_background
from flowtrack.flow import label_sequence
from flowtrack.synth import SceneSpec, generate, standard_suites


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    kernels.warmup()


@pytest.fixture(scope="session")
def small_scene():
    """Two movers on a 128x128 canvas, 14 frames: fast shared input."""
    spec = SceneSpec(width=128, height=128, n_objects=2, seed=9,
                     length_range=(26.0, 34.0), thickness_range=(8.0, 10.0))
    frames, truth = generate(spec, 14)
    return frames, truth


@pytest.fixture(scope="session")
def small_scene_labels(small_scene):
    frames, truth = small_scene
    bg = estimate_background(frames, 10)
    labels = label_sequence(frames, bg, ThresholdParams(), workers=2)
    return labels


@pytest.fixture(scope="session")
def suite_s2_run(tmp_path_factory):
    """One full pipeline run on a 12-frame S2 scene, reused by eval/CLI tests."""
    from flowtrack.cli import main

    root = tmp_path_factory.mktemp("s2run")
    assert main(["synth", "--suite", "S2", "--frames", "12", "--out", str(root / "scene")]) == 0
    assert main(["run", "--frames", str(root / "scene" / "frames"),
                 "--out", str(root / "out")]) == 0
    return root


def mask_iou_np(a, b):
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return inter / union if union else 1.0
