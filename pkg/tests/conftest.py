import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture(scope="session")
def matrix_verdicts():
    """All shipped verifier configurations, run once per session at their
    default seeds; keyed by entry name."""
    import geomflow

    return {e.name: (e, e.run()) for e in geomflow.builtin_matrix()}
