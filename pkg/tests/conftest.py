import pytest

from microgesture import get_layout, synthesize_dataset
from microgesture.config import desk_config_dict, run_config_from_dict


@pytest.fixture(scope="session")
def toy_manifest():
    """8 clips / 4 classes on the 5-joint layout; splits 4/2/2."""
    return synthesize_dataset(8, 4, get_layout("toy_5"), seed=7)


@pytest.fixture
def make_config():
    """Factory for desk-profile run configs with per-section overrides."""

    def make(seed=0, **sections):
        data = desk_config_dict()
        data["seed"] = seed
        data["data"]["manifest"] = "unused"
        for name, updates in sections.items():
            data[name].update(updates)
        return run_config_from_dict(data)

    return make
