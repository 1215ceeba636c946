"""Shared fixtures: a small generated dataset reused by the heavier
integration tests. Hand-built exact-feature datasets live in helpers.py.
"""

import pytest

from oodkit.fmap import FitConfig, fit
from oodkit.synth import EulSceneConfig, SynthConfig, generate, generate_eul_scenes


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth-small")
    generate(SynthConfig(num_images=40, objects_per_image=4, seed=11), out)
    return out


@pytest.fixture(scope="session")
def synth_manifest(synth_dir):
    from oodkit.tensor_io import load_manifest

    return load_manifest(synth_dir / "manifest.json")


@pytest.fixture(scope="session")
def synth_bank(synth_manifest):
    return fit(synth_manifest, FitConfig())


@pytest.fixture(scope="session")
def scenes_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth-scenes")
    generate_eul_scenes(EulSceneConfig(num_scenes=12, seed=5), out)
    return out
