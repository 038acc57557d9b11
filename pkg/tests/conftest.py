import numpy as np
import pytest
from hypothesis import settings

from fscert.encoders import gen_mixture_dataset, make_encoder

settings.register_profile("fscert", max_examples=60, deadline=None)
settings.load_profile("fscert")


@pytest.fixture(scope="session")
def toy_encoder():
    return make_encoder("mlp", 16, 8, 0, hidden_dims=[32], gain=3.0)


@pytest.fixture(scope="session")
def toy_data():
    return gen_mixture_dataset(4, 200, 16, 1.0, 0, spread=0.1, latent_dim=2)


@pytest.fixture(scope="session")
def toy_split(toy_data):
    return toy_data.split(0.25, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TOY_GSB = dict(lr_p=3e-2, lr_m=5e-2, batch_size=8)


@pytest.fixture(scope="session")
def toy_gsb(toy_encoder, toy_split):
    from fscert.gsb import GsbConfig, train_gsb

    P, M, history = train_gsb(toy_encoder, toy_split[0], GsbConfig(**TOY_GSB))
    return P, M, history


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
