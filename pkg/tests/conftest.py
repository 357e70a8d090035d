import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dmimo_lab.numkit import RngStream  # noqa: E402


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture
def npr():
    return np.random.default_rng(20240)
