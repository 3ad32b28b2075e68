import pytest

_RESULTS = {}


class AcceptanceRecorder:
    def __call__(self, number: int, title: str, ok: bool, detail: str = "") -> None:
        _RESULTS[number] = (title, bool(ok), detail)
        assert ok, f"criterion {number} ({title}) failed: {detail}"


@pytest.fixture
def criterion():
    return AcceptanceRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, ok, detail = _RESULTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {n}: {title} [{detail}]")
