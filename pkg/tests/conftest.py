import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # makes `oracles` importable

from rc3e import Hypervisor, default_fleet


@pytest.fixture
def fleet():
    return default_fleet()


@pytest.fixture
def hv(fleet):
    return Hypervisor(fleet)
