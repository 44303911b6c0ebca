import logging

import numpy as np
import pytest

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        prev = _ACCEPTANCE.get(number)
        # a criterion with several tests fails if any of them fails
        if prev is None or prev[1] == "PASS":
            _ACCEPTANCE[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {title}")


@pytest.fixture(autouse=True)
def _quiet_warnings(caplog):
    caplog.set_level(logging.ERROR, logger="spregimes")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_design(rng, n, p, intercept=True):
    X = rng.standard_normal((n, p))
    if intercept:
        X[:, 0] = 1.0
    return X


def random_knn_W(rng, n, k=5):
    from spregimes.weights import knn_row_normalized_W

    return knn_row_normalized_W(rng.uniform(size=(n, 2)), k)
