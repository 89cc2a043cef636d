import os
from contextlib import contextmanager
from time import perf_counter

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=300, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance criterion as PASS or FAIL with its measurements."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    @contextmanager
    def check(number, title, limit=None):
        measured = {}
        t0 = perf_counter()
        try:
            yield measured
            elapsed = perf_counter() - t0
            measured["seconds"] = round(elapsed, 2)
            if limit is not None:
                assert elapsed < limit, f"took {elapsed:.1f} s, limit {limit} s"
        except BaseException:
            measured.setdefault("seconds", round(perf_counter() - t0, 2))
            results[number] = ("FAIL", title, measured)
            raise
        results[number] = ("PASS", title, measured)

    return check


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        verdict, title, measured = results[number]
        detail = "  ".join(f"{k}={v}" for k, v in measured.items())
        terminalreporter.write_line(f"{verdict}  {number}. {title}  [{detail}]")
