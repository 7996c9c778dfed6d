import pytest

CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """record(number, passed, detail): one pass/fail line per acceptance criterion."""
    table = request.config.stash.setdefault(CRITERIA, {})

    def record(number: int, passed: bool, detail: str) -> bool:
        table[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(CRITERIA, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(table):
        passed, detail = table[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
