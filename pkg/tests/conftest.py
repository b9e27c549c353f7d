import pytest

_CRITERIA: list = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


@pytest.fixture
def criterion():
    """record(name, ok, detail) -> ok; the line is also shown in the terminal summary."""

    def record(name: str, ok: bool, detail: str = "") -> bool:
        line = f"{name}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        _CRITERIA.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
