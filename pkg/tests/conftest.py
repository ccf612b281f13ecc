import numpy as np
import pytest

from normvae.cvae import CvaeConfig, CvaeModel
from normvae.numerics import RngStream

TINY = CvaeConfig(input_dim=5, latent_dim=3, hidden_dim=8, hidden_layers=3,
                  batch_size=4, epochs=3, mc_samples=10)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    return CvaeModel.initialize(TINY, RngStream(11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config.stash[CRITERIA] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    results = item.config.stash[CRITERIA]
    passed, _ = results.get(number, (True, title))
    if report.failed or (report.when == "call" and report.skipped):
        passed = False
    results[number] = (passed, title)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[CRITERIA]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, title = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {title}")
