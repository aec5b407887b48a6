import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vlgen import tensor as T
from vlgen.data import generate_corpus
from vlgen.encoders import EncoderConfig, init_params

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = EncoderConfig(hidden=8, n_heads=2, visual_layers=1, text_layers=1, multimodal_layers=1, patch=8,
                     image_height=16, image_width=16, contrastive_dim=4)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_params():
    return init_params(TINY, 0)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(3, 24)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with T.float64_mode():
        yield


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
