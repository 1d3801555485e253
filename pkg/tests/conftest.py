import numpy as np
import pytest

import gradflow.examples as examples

# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion, then assert."""

    def record(num: int, ok: bool, detail: str):
        line = f"criterion {num}: {'pass' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


@pytest.fixture
def foo():
    return examples.build("scaled_product_chain")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
