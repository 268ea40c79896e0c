import pytest

N_CRITERIA = 8
_LINES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_LINES] = {}


@pytest.fixture
def criterion(request):
    """Record and print one pass/fail line for an acceptance criterion."""
    lines = request.config.stash[_LINES]

    def report(number: int, title: str, passed: bool, detail: str) -> bool:
        lines[number] = f"criterion {number} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        print(lines[number])
        return passed

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[_LINES]
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(lines.get(n, f"criterion {n} FAIL  not evaluated (test errored or was deselected)"))
