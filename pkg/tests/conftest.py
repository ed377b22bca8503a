import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# filled by test_acceptance.py, printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_grid_cfg():
    from lcnerf.encodings import HashGridConfig
    return HashGridConfig(levels=4, table_size=2 ** 10, features=2, n_min=2, n_max=24)


TINY_MODEL = {"levels": 4, "table_size": 2 ** 10, "n_min": 2, "n_max": 16,
              "tenso_resolution": 12, "density_rank": 2, "app_rank": 4, "app_features": 6,
              "decoder_width": 16}


def tiny_config(**overrides):
    """A run config that trains in milliseconds per step on 16x16 views."""
    from lcnerf.pipeline.config import RunConfig
    base = dict(TINY_MODEL, iterations=20, batch_rays=128, n_samples=16, eval_train_rays=256,
                chunk_rays=512)
    base.update(overrides)
    return RunConfig().with_overrides(base)


@pytest.fixture(scope="session")
def tiny_bundle():
    from lcnerf.pipeline.fixtures import make_bundle
    return make_bundle(n_train=2, n_test=2, n_val=1, size=16)
