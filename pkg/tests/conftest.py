import pytest

_CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; returns the pass flag for asserting."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        mark = "PASS" if passed else "FAIL"
        line = f"criterion {number}: {mark}  {title} | {detail}"
        request.config.stash[_CRITERIA].append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config.stash.get(_CRITERIA, []))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in lines:
            terminalreporter.write_line(line)
