import os
import sys

import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("ci", max_examples=30, deadline=None)
settings.load_profile("ci")


@pytest.fixture()
def tu_dir(tmp_path):
    """Temporary directory holding synthetic TU-format datasets."""
    return str(tmp_path / "data")


def benchmark_data_root() -> str | None:
    """Locate real TU benchmark data, if the environment provides it."""
    candidates = [os.environ.get("GRAPHCAPS_DATA"), "data", "tests/data"]
    for root in candidates:
        if root and os.path.isfile(os.path.join(root, "MUTAG", "MUTAG_A.txt")):
            return root
        if root and os.path.isfile(os.path.join(root, "MUTAG_A.txt")):
            return root
    return None
