import os

import pytest
from hypothesis import HealthCheck, settings

from superguide.data import SpuriousSpec, generate_synthetic

settings.register_profile(
    "default", max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def tiny_spec(**kw):
    base = dict(split_sizes={"train": 64, "val": 16, "test": 16}, seed=3)
    base.update(kw)
    return SpuriousSpec(**base)


@pytest.fixture(scope="session")
def tiny_ds():
    return generate_synthetic(tiny_spec())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
