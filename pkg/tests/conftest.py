import numpy as np
import pytest

from hsicaps import data


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cube():
    """4x5 cube with 6 bands spread over several slices."""
    rng = np.random.default_rng(7)
    wavelengths = (480.0, 550.0, 620.0, 700.0, 760.0, 900.0)
    arr = rng.uniform(0.1, 0.9, size=(4, 5, 6)).astype(np.float32)
    return data.HsiCube(4, 5, 6, wavelengths, arr)


@pytest.fixture
def small_labels():
    lab = np.array([
        [1, 1, 2, 2, 0],
        [1, 1, 2, 2, 3],
        [0, 1, 2, 3, 3],
        [1, 2, 2, 3, 3],
    ])
    return data.labelmap_from_array(lab)
