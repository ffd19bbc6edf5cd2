import pytest

from piscolab.env import EnvConfig, calibrate_geometry


@pytest.fixture(scope="session")
def calibrated():
    """Geometry-checked default config, shared across the whole test run."""
    return calibrate_geometry(EnvConfig())
