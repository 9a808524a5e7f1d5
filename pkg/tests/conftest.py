import numpy as np
import pytest

from vox2surf import ndtensor


@pytest.fixture(autouse=True)
def fresh_tape():
    ndtensor.set_default_dtype(np.float64)
    ndtensor.reset_tape()
    yield
    ndtensor.reset_tape()
