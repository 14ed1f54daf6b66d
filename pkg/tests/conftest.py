import pytest

_LINES_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES_KEY] = []


@pytest.fixture(scope="session")
def criterion_log(request):
    """Collects one summary line per acceptance criterion for the terminal report."""
    lines = request.config.stash[_LINES_KEY]

    def log(number: int, title: str, passed: bool, detail: str):
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} | {detail}"
        lines.append(line)
        print(line)

    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
