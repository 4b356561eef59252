import pytest

_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict(request):
    """Record one acceptance line: ``verdict(n, title, ok, detail)``."""
    def record(n: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        _VERDICTS[n] = line
        with request.config.pluginmanager.get_plugin("capturemanager").global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
