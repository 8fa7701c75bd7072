import pytest

from diffest.acceptance import Context


@pytest.fixture(scope="session")
def shared_context():
    """Simulation cache shared by the acceptance checks and the slow property tests."""
    return Context()
