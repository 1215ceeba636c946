from pathlib import Path

import pytest

from oodkit_exporter import TAP_FACTORS, TapSpec, TinyDetector
from pngtools import write_png


@pytest.fixture(scope="session")
def image_dir(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("images")
    write_png(root / "scene_a.png", 64, 64, seed=1)
    write_png(root / "scene_b.png", 64, 64, seed=2)
    return root


@pytest.fixture(scope="session")
def detector() -> TinyDetector:
    return TinyDetector(num_classes=3, seed=7)


@pytest.fixture(scope="session")
def standard_taps() -> list[TapSpec]:
    return [TapSpec(name, factor) for name, factor in TAP_FACTORS.items()]
