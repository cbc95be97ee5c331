import pytest

from dialogforge.atomic_ops import MockBackend


@pytest.fixture(scope="session")
def backend():
    return MockBackend()
