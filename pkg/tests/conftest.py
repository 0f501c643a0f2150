import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nlmevem.data import simulate_population
from nlmevem.models import catalog_lookup
from nlmevem.subject import DoseEvent, Subject

settings.register_profile(
    "nlmevem", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("nlmevem")

WARFARIN_TIMES = (0.5, 1, 2, 3, 6, 12, 24, 48, 72, 120)


def design(model, times, doses=(), covariates=None):
    """An observation-free subject template for ``model``."""
    n = len(times)
    return Subject(
        "design",
        np.asarray(times, dtype=float),
        {r: np.full(n, np.nan) for r in model.responses},
        tuple(doses),
        covariates or {},
    )


def simulated(name, n, times, theta=None, seed=0, doses=(), **options):
    model = catalog_lookup(name, **options)
    theta = model.theta_init if theta is None else np.asarray(theta, dtype=float)
    return model, simulate_population(model, n, design(model, times, doses), theta, seed)


def warfarin_design(model):
    return design(model, WARFARIN_TIMES, (DoseEvent(0.0, 100.0, 0),))


@pytest.fixture
def linear_gaussian_data():
    return simulated("linear_gaussian", 50, [1, 2, 3, 4, 5], theta=[0.5, 1.2, 0.8], seed=11)


@pytest.fixture
def logistic_data():
    return simulated("logistic_1d", 6, np.linspace(0, 6, 12), theta=[-3.0, 1.0, 0.8, 0.1], seed=5)


# acceptance-suite reporting ---------------------------------------------------------------
ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def criterion(request, capsys):
    """Record one acceptance criterion: ``with criterion(7, "title") as note: ...``.

    ``note(text)`` attaches measured values to the printed line.  The line is
    printed immediately and repeated in the terminal summary.
    """
    from contextlib import contextmanager

    @contextmanager
    def run(number, title):
        details = []
        status = "FAIL"
        try:
            yield details.append
            status = "PASS"
        finally:
            line = f"criterion {number:>2} {status}: {title}"
            if details:
                line += " [" + "; ".join(details) + "]"
            request.config.stash[ACCEPTANCE].append(line)
            with capsys.disabled():
                print("\n" + line)

    return run


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
