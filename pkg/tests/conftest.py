import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vocalign.lora import LoraSet
from vocalign.model import BackboneParams, ModelConfig, Vocabulary

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion number and summary")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    n, text = marker.args
    outcome = "PASS" if call.excinfo is None else "FAIL"
    _CRITERIA[n] = (outcome, text)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        outcome, text = _CRITERIA[n]
        terminalreporter.write_line(f"[{outcome}] criterion {n:2d}: {text}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(d_model=16, n_blocks=4, d_agg=8)


@pytest.fixture(scope="session")
def small_params(small_config):
    return BackboneParams.init(small_config, seed=3).freeze()


@pytest.fixture
def small_vocab():
    return Vocabulary(("cat", "road", "sky"), ("a photo of a {}.", "a {} in the scene."))


def random_adapters(d, rank, rng, scale=0.05):
    """Adapters with nonzero B so that every factor receives gradient."""
    ad = LoraSet.create(d, rank, rng)
    for _, a in ad.items():
        a.B.data = rng.normal(0.0, scale, a.B.shape)
    return ad
