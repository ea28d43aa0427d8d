import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dreamfore.config import ModelConfig, TrainConfig
from dreamfore.synthetic import generate_synthetic

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES: list[str] = []


def tiny_model(**kw) -> ModelConfig:
    base = dict(n_max=6, d_model=8, subgraph_hidden=8, h_dim=16, predictor_hidden=16, kin_hidden=8,
                target_hidden=8, traj_hidden=16, score_hidden=8, n_anchors=12, m_targets=3)
    base.update(kw)
    return ModelConfig(**base)


def tiny_config(**kw) -> TrainConfig:
    model = kw.pop("model", tiny_model())
    base = dict(epochs=2, batch_size=2, H=4, T=0.3, warmup_epochs=0)
    base.update(kw)
    return TrainConfig(model=model, **base)


@pytest.fixture(scope="session")
def corpus():
    return generate_synthetic(0, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
