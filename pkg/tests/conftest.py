from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_paths():
    images = MNIST_DIR / "train-images-idx3-ubyte.gz"
    labels = MNIST_DIR / "train-labels-idx1-ubyte.gz"
    if not images.exists():
        pytest.skip("bundled MNIST files not found")
    return str(images), str(labels)


# one PASS/FAIL line per acceptance criterion, printed after the run
_ACCEPTANCE_LINES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
    verdict = "PASS" if rep.passed else "FAIL"
    line = f"criterion {number:2d} {verdict}  {title}" + (f"  [{detail}]" if detail else "")
    _ACCEPTANCE_LINES[number] = line


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(_ACCEPTANCE_LINES[n])
