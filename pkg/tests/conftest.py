import numpy as np
import pytest


def pytest_runtest_logreport(report):
    # one visible pass/fail line per acceptance criterion, with the
    # criterion's own printed metrics replayed beneath it
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        print(f"\n[acceptance] {name}: {report.outcome.upper()}")
        for line in getattr(report, "capstdout", "").splitlines():
            if line.strip():
                print(f"    {line}")


@pytest.fixture
def rng_np():
    return np.random.default_rng(1234)
