import sys

import numpy as np
import pytest
from hypothesis import settings

from linepose.datagen import SceneParams, generate_scene
from linepose.model import ModelConfig

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(11, SceneParams(n_points=40, n_lines=12))


@pytest.fixture(scope="session")
def small_pairs():
    params = SceneParams(n_points=40, n_lines=12)
    return [generate_scene([5, i], params).matches for i in range(6)]


@pytest.fixture
def tiny_config():
    return ModelConfig(width=8, depth=2, heads=2)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
