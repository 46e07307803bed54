import numpy as np
import pytest
import torch

from selfinverse.data import SyntheticTaskSpec, generate_synthetic
from selfinverse.gradcheck import TINY_DISCRIMINATOR, TINY_GENERATOR
from selfinverse.training import TrainConfig


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def tiny_negation_ds():
    return generate_synthetic(
        SyntheticTaskSpec(task="biased_negation", image_size=8, n_samples=10, seed=0)
    )


@pytest.fixture
def tiny_gamma_ds():
    return generate_synthetic(
        SyntheticTaskSpec(task="gamma_swap", image_size=8, n_samples=10, seed=0)
    )


def tiny_train_config(**kw) -> TrainConfig:
    defaults = dict(mode="one2one", epochs=1, batch_size=2,
                    generator=TINY_GENERATOR, discriminator=TINY_DISCRIMINATOR, seed=0)
    defaults.update(kw)
    return TrainConfig(**defaults)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
