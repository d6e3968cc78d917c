import numpy as np
import pytest

_VERDICTS = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def verdict():
    """Record one acceptance line; printed in the terminal summary."""
    def record(criterion: int, ok: bool, detail: str):
        _VERDICTS.append((criterion, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
        return ok
    return record


@pytest.fixture(scope="session")
def desk_outcomes():
    from distilrank.experiment import run_desk_seed
    return {seed: run_desk_seed(seed) for seed in (0, 1, 2)}


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in sorted(_VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
