import pytest
import torch

# (criterion number, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE_LINES = []


@pytest.fixture(autouse=True)
def double_precision():
    """Unit tests run in float64 unless they build a model with an explicit dtype."""
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture
def acceptance():
    def record(number, passed, detail):
        ACCEPTANCE_LINES.append((number, bool(passed), detail))
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
