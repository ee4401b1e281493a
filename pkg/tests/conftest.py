import os

import pytest

from carechain.schemas import ScenarioConfig


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "slow: long-running acceptance checks and full default-scenario runs (run via carechain test-slow)",
    )


def pytest_addoption(parser):
    parser.addoption(
        "--output-dir",
        default=None,
        help="Directory to save test output files. Defaults to a pytest-managed temp directory.",
    )


@pytest.fixture(scope="session")
def output_dir(tmp_path_factory, request):
    custom = request.config.getoption("--output-dir")
    if custom:
        os.makedirs(custom, exist_ok=True)
        return custom
    return str(tmp_path_factory.mktemp("carechain_test"))


@pytest.fixture(scope="session")
def small_config():
    """A short scenario on the small test group, fast enough for the default suite."""
    return ScenarioConfig.model_validate({
        "seed": 11,
        "patients": 4,
        "hospitals": 2,
        "validators": 3,
        "duration_ms": 30_000,
        "crypto": {"group_profile": "test", "paillier_bits": 128},
        "fl": {"rounds": 2, "epochs": 5, "rows_per_hospital": 8, "attack_rows": 4, "holdout_rows": 20},
        "telemedicine": {"request_interval_ms": 4000, "revoke_at_ms": 15000, "revoke_every": 2},
        "bench": {"probe_ms": 2000, "probe_offered_tps": 50.0},
    })
