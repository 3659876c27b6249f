import pytest

from otfs_isac.bench import ExperimentConfig, run_sweep

POWER_GRID = (3.0, 5.0, 7.0, 9.0, 11.0, 13.0, 15.0, 17.0)
COS_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)


@pytest.fixture(scope="session")
def power_sweep():
    """Desk-scale transmit-power sweep, 300 trials per point."""
    cfg = ExperimentConfig.from_dict({"sweep": {"trials": 300, "grid": list(POWER_GRID)}})
    return run_sweep(cfg, write=False)


@pytest.fixture(scope="session")
def cos_sweep():
    """Coupling-angle sweep at 17 dBm, 200 trials per point."""
    cfg = ExperimentConfig.from_dict({"sweep": {"trials": 200, "variable": "cos_theta",
                                                "grid": list(COS_GRID)}})
    return run_sweep(cfg, write=False)
