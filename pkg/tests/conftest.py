import numpy as np
import pytest

from overlearn.data import ContingencySpec, LabeledExample, generate_synthetic


@pytest.fixture
def uniform_2x2():
    return ContingencySpec(np.full((2, 2), 0.25))


@pytest.fixture
def small_bundle(uniform_2x2):
    return generate_synthetic(uniform_2x2, 400, 8, 0.3, seed=3, transfer_fracs=(0.1, 1.0))


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(11)
    return [LabeledExample(rng.standard_normal(4), int(i % 2), int((i // 2) % 3), uid=i)
            for i in range(12)]


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
