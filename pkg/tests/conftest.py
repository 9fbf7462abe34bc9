import pytest

from irblurdet.blursynth import SynthConfig, build_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small shared corpus: 8 train / 2 val / 2 test pairs at 96x96."""
    out = tmp_path_factory.mktemp("tiny_data")
    config = SynthConfig(counts={"train": 8, "val": 2, "test": 2}, seed=11)
    manifest = build_dataset(config, out)
    return manifest
