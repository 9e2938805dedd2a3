import pytest

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def acceptance():
    def record(key: str, ok: bool, detail: str) -> None:
        ACCEPTANCE[key] = f"{key}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, ACCEPTANCE[key]

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
