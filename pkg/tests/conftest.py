import numpy as np
import pytest

from mannflow.data import synthesize_planted
from mannflow.model import Dimensions, ModelWeights

_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA.append((marker.args[0], marker.args[1], report.outcome, item.name))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, text, outcome, name in sorted(_CRITERIA):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {text}  ({name})")


def random_model(rng, V=None, E=None, I=None, L=None, T=None, shared=None, scale=1.0):
    dims = Dimensions(
        vocab_size=V or int(rng.integers(1, 33)),
        embed_dim=E or int(rng.integers(1, 17)),
        output_dim=I or int(rng.integers(1, 33)),
        memory_slots=L or int(rng.integers(1, 17)),
        hops=T or int(rng.integers(1, 4)),
    )
    if shared is None:
        shared = bool(rng.integers(0, 2))
    return ModelWeights.random(dims, rng, scale, shared_embeddings=shared)


def random_story(rng, model, n_sentences=None, max_words=6):
    d = model.dims
    n = n_sentences or int(rng.integers(1, d.memory_slots + 1))
    story = [tuple(rng.integers(0, d.vocab_size, size=int(rng.integers(1, max_words + 1))).tolist())
             for _ in range(n)]
    q = tuple(rng.integers(0, d.vocab_size, size=int(rng.integers(1, max_words + 1))).tolist())
    return story, q


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_planted():
    return synthesize_planted(5, 6, 4, 600, seed=3)
