import pytest


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.call_passed = rep.passed


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
