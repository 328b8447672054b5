import pytest

_ACCEPTANCE = {}


@pytest.fixture
def acceptance(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def report(number: int, ok: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
