import pytest
import torch

from cofipara.model import ModelConfig

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown":
        return
    # module fixtures (the shared overfit run) count toward the first test that uses them
    n, title = mark.args
    _, ok, elapsed = _RESULTS.get(n, (title, True, 0.0))
    _RESULTS[n] = (title, ok and rep.passed and not (rep.when == "setup" and rep.skipped), elapsed + rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, ok, elapsed = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {title}  ({elapsed:.1f}s)")


@pytest.fixture
def tiny_cfg():
    return ModelConfig(d_model=8, heads=2, encoder_layers=1, L=2, K=2, n_q=4, image_size=32, patch_size=8,
                       max_tokens=48, max_target_len=16)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)
