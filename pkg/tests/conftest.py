import contextlib
import time

import pytest

_RESULTS: list[tuple[str, bool, str, float]] = []


class _Criterion:
    def __init__(self, name: str):
        self.name = name
        self.detail = ""


@pytest.fixture
def criterion():
    """``with criterion("name") as c:`` records pass/fail (any exception fails) plus ``c.detail``."""

    @contextlib.contextmanager
    def run(name: str):
        c = _Criterion(name)
        start = time.perf_counter()
        try:
            yield c
        except BaseException as exc:
            msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            _RESULTS.append((name, False, f"{c.detail} {msg}".strip(), time.perf_counter() - start))
            raise
        _RESULTS.append((name, True, c.detail, time.perf_counter() - start))

    return run


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail, seconds in _RESULTS:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{status}  {name} ({seconds:.1f}s) {detail}")
