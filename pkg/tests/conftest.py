import numpy as np
import pytest

from cdevolve import contract, genome, taskbench


@pytest.fixture(scope="session")
def ds():
    return taskbench.generate(taskbench.TaskSpec())


@pytest.fixture(scope="session")
def base_contract():
    return contract.Contract.for_master_seed(0)


@pytest.fixture
def g0():
    return genome.default_genome()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def family_genome(family, **model_overrides):
    import dataclasses
    g = genome.default_genome()
    return dataclasses.replace(g, model=genome.ModelSpec.for_family(family, **model_overrides))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
