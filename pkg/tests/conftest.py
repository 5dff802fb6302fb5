import pytest

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion():
    """Record an acceptance verdict and fail the test when it does not hold."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        ACCEPTANCE[number] = (title, ok, detail)
        line = f"AC{number:<2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"AC{number:<2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
