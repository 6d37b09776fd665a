import time

import pytest

_SUITE_LIMIT_S = 60.0


def pytest_sessionstart(session):
    session.config._suite_t0 = time.perf_counter()


def pytest_sessionfinish(session, exitstatus):
    elapsed = time.perf_counter() - session.config._suite_t0
    ok = elapsed < _SUITE_LIMIT_S
    print(
        f"\nACCEPTANCE 12 full suite wall time {elapsed:.1f}s "
        f"< {_SUITE_LIMIT_S:.0f}s: {'PASS' if ok else 'FAIL'}"
    )
    if not ok and session.exitstatus == 0:
        session.exitstatus = 1


@pytest.fixture
def golden_dir(request):
    return request.config.rootpath / "tests" / "golden"
