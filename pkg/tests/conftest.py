import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from appraiser.fixture import generate_fixture  # noqa: E402

SEED = 42


@pytest.fixture(scope="session")
def fixture42():
    return generate_fixture(SEED)


@pytest.fixture(scope="session")
def model42(fixture42):
    return fixture42[0]


@pytest.fixture(scope="session")
def data42(fixture42):
    return fixture42[1]


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory, fixture42):
    from appraiser.model_io import save_dataset, save_model

    root = tmp_path_factory.mktemp("fixture42")
    save_model(fixture42[0], root / "model")
    save_dataset(fixture42[1], root / "data")
    return root
