import hypothesis
import pytest
import torch

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture(scope="session")
def synthetic():
    from glanet.data import SyntheticSpec, generate_synthetic

    return generate_synthetic(SyntheticSpec(resolution=64, count=8, seed=7))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
