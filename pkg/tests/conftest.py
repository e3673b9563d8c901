import pytest

# criterion number -> (passed, detail), filled by the acceptance suite
ACCEPTANCE: dict = {}


@pytest.fixture
def record_criterion():
    def record(number: int, title: str, passed: bool, detail: str) -> None:
        ACCEPTANCE[number] = (title, bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")
