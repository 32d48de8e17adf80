import pytest

from depthdbd.data import load_dataset, parse_regime, synth_dataset


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    """16-sample synthetic set, alternating f/1.8 and f/16, 64x64."""
    root = tmp_path_factory.mktemp("synth16")
    synth_dataset(root, 16, [parse_regime("f1.8"), parse_regime("f16")], seed=0, size=(64, 64))
    return root


@pytest.fixture(scope="session")
def fixture_records(fixture_root):
    return load_dataset(fixture_root)
