import numpy as np
import pytest

from msmanifold import build_example_problem


@pytest.fixture(scope="session")
def example_problem():
    """m=4 flux-free example problem; built once, boundary ladder included."""
    return build_example_problem(m=4)


@pytest.fixture(autouse=True)
def _fixed_numpy_printoptions():
    with np.printoptions(precision=17):
        yield
