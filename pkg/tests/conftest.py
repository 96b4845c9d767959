import pytest

_criteria: list[tuple[str, bool, str]] = []


class CriterionLog:
    """Records one verdict line per acceptance criterion."""

    def record(self, name: str, passed: bool, detail: str) -> bool:
        _criteria.append((name, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
        return bool(passed)


@pytest.fixture(scope="session")
def criteria():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _criteria:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
