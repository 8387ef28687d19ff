import numpy as np
import pytest

from panseg.volume import Volume3D


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture
def random_volume(rng):
    def make(shape_xyz=(10, 9, 8), spacing=(1.0, 1.0, 1.0), lo=-100, hi=200,
             integer=False):
        nx, ny, nz = shape_xyz
        data = rng.uniform(lo, hi, size=(nz, ny, nx))
        if integer:
            data = np.rint(data)
        return Volume3D(data, spacing)
    return make
