import pytest

_RESULTS: dict[int, tuple[str, str, str]] = {}


class CriterionLog:
    """Collects one verdict per acceptance criterion for the terminal summary."""

    def record(self, number: int, title: str, passed: bool | None, detail: str = "") -> bool:
        verdict = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        _RESULTS[number] = (title, verdict, detail)
        return bool(passed)


@pytest.fixture(scope="session")
def criteria():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, verdict, detail = _RESULTS[number]
        line = f"{verdict} criterion {number:2d}: {title}"
        terminalreporter.write_line(f"{line} | {detail}" if detail else line)
