import numpy as np
import pytest

from xfm.data import ShapeWorld, ShapeWorldSpec, materialize, schedule_batches
from xfm.encoders import XFM, EncoderConfig


@pytest.fixture(scope="session")
def cfg():
    return EncoderConfig()


@pytest.fixture(scope="session")
def world():
    return ShapeWorld(ShapeWorldSpec())


@pytest.fixture
def model(cfg):
    return XFM(cfg, seed=0)


@pytest.fixture
def batch(world):
    return materialize(world, schedule_batches(0, {"text": 4, "image": 4, "pair": 4}))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """The 2,000-step fixed-corpus run shared by acceptance and evaluation tests."""
    import time

    from xfm.trainer import overfit_preset, train

    out = tmp_path_factory.mktemp("overfit")
    started = time.perf_counter()
    result = train(overfit_preset(), out)
    result.seconds = time.perf_counter() - started
    return result


# --- acceptance summary ---------------------------------------------------------------


def pytest_configure(config):
    config.acceptance = {}


@pytest.fixture
def criterion(request):
    """Record a numbered acceptance criterion as PASS or FAIL for the summary."""
    from contextlib import contextmanager

    @contextmanager
    def record(number: int, title: str):
        detail = {}
        try:
            yield detail
        except BaseException:
            request.config.acceptance[number] = ("FAIL", title, detail)
            raise
        request.config.acceptance[number] = ("PASS", title, detail)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        status, title, detail = results[number]
        extra = ", ".join(f"{k}={v}" for k, v in detail.items())
        terminalreporter.write_line(f"[{status}] {number}. {title}" + (f" ({extra})" if extra else ""))
