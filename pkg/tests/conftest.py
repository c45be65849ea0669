import numpy as np
import pytest

from ichfusion.phantom import PhantomConfig, generate_studies
from ichfusion.sampler import Dataset


def small_phantom(**kw) -> PhantomConfig:
    base = dict(image_size=16, slices=(6, 10), seed=11)
    base.update(kw)
    return PhantomConfig(**base)


@pytest.fixture
def small_dataset() -> Dataset:
    return Dataset.from_studies(generate_studies(small_phantom(), 4))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion lines recorded by test_acceptance.py, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
