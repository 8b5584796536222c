import pytest

# (criterion number, passed, detail) appended by the acceptance suite
CRITERIA: list[tuple[int, bool, str]] = []


@pytest.fixture
def record():
    def _record(number: int, ok: bool, detail: str):
        CRITERIA.append((number, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        assert ok, detail

    return _record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(CRITERIA):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}")
