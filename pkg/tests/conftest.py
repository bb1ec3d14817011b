import pytest

from shortfall_hedge.core import LossSpec, ModelParams, OptionSpec, ShapingLaw

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_log(request):
    """Record ``PASS``/``FAIL`` lines shown in the terminal summary (and echoed to stdout)."""
    def log(line):
        print(line)
        request.config.stash[_LINES].append(line)
    return log


@pytest.fixture
def params():
    return ModelParams(0.1, 0.28)


@pytest.fixture
def spec():
    return LossSpec(2.0, -0.1)


@pytest.fixture
def opt_month():
    """ATM call, 20-day revelation, 40-day expiry."""
    return OptionSpec(50.89, 20 / 250, 40 / 250)


@pytest.fixture
def opt_long():
    return OptionSpec(50.89, 128 / 250, 184 / 250)


@pytest.fixture
def beta_law():
    return ShapingLaw.scaled_beta(3.0, 114.0, 227.0)
