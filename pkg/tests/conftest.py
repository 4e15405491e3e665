import pytest

from rubric_reward.gateway import Gateway
from rubric_reward.store import Store

from helpers import write_png


@pytest.fixture
def store(tmp_path):
    return Store(tmp_path / "store")


@pytest.fixture
def gateway(store):
    return Gateway(store=store, backoff_base=0.0)


@pytest.fixture
def image(tmp_path):
    return write_png(tmp_path / "img" / "red.png", (255, 0, 0))


@pytest.fixture
def image2(tmp_path):
    return write_png(tmp_path / "img" / "blue.png", (0, 0, 255))


# -- acceptance reporting ---------------------------------------------------

_ACCEPTANCE: dict[str, tuple[str, str, float]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    label = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.failed):
        # parametrized criteria pass only if every case passes
        prev_status, _, prev_secs = _ACCEPTANCE.get(label, ("PASS", "", 0.0))
        status = "PASS" if report.passed and prev_status == "PASS" else "FAIL"
        _ACCEPTANCE[label] = (status, marker.args[1], prev_secs + report.duration)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(id, title): one acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_ACCEPTANCE, key=lambda s: int(s.split("-")[1])):
        status, title, secs = _ACCEPTANCE[label]
        terminalreporter.write_line(f"{status} {label} {title} ({secs:.2f}s)")
