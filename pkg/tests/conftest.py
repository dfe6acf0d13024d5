import numpy as np
import pytest

from cmoe.model import (GAUSSIAN, LAPLACE, TANH, ModelSpec, PretrainedSpec,
                        PromptParams)
from cmoe.sampler import Scenario, make_truth


def random_params(rng, d, q, nu_low=1e-4, nu_high=1.0):
    return PromptParams(rng.normal(0, 0.7, d), rng.normal(0, 1.0), rng.normal(0, 0.8, q),
                        float(np.exp(rng.uniform(np.log(nu_low), np.log(nu_high)))))


def toy_spec(d=3, family=LAPLACE, nu0=0.05, kind=TANH):
    eta0 = np.zeros(kind.q(d))
    eta0[0] = 1.0
    return ModelSpec(d, PretrainedSpec(family, kind, eta0, nu0), kind)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def truth_a():
    return make_truth(Scenario("a"), 1000)


@pytest.fixture(params=[GAUSSIAN, LAPLACE])
def family(request):
    return request.param


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record the one-line outcome of an acceptance criterion."""
    def record(number: int, passed: bool, detail: str) -> bool:
        _CRITERIA[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
