import numpy as np
import pytest

from weakpoint import numerics as nx


def projected(out: nx.Tensor, seed: int = 99) -> nx.Tensor:
    """Scalar <out, R> for a fixed random R, so every output entry is checked."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return nx.sum_all(nx.mul(out, nx.Tensor(r)))


def param(rng, *shape, scale=1.0):
    return nx.Tensor(scale * rng.standard_normal(shape), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
