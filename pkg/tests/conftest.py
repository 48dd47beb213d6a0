import time
from contextlib import contextmanager

import pytest

_RESULTS: list[str] = []


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title = number, title
        self.checks: list[tuple[str, bool]] = []

    def check(self, label: str, ok) -> None:
        self.checks.append((label, bool(ok)))


@pytest.fixture
def criterion():
    """Context manager that logs one PASS/FAIL line per acceptance criterion."""

    @contextmanager
    def run(number, title):
        c = _Criterion(number, title)
        t0 = time.perf_counter()
        err = None
        try:
            yield c
        except Exception as e:  # logged, then re-raised
            err = e
            raise
        finally:
            ok = err is None and c.checks and all(ok for _, ok in c.checks)
            detail = "; ".join(f"{label}{'' if ok else ' [x]'}" for label, ok in c.checks)
            if err is not None:
                detail += f"; raised {type(err).__name__}: {err}"
            line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} {title} ({time.perf_counter() - t0:.1f} s): {detail}"
            _RESULTS.append(line)
            print(line)
        failed = [label for label, ok in c.checks if not ok]
        assert not failed, f"criterion {number} failed: {failed}"

    return run


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in _RESULTS:
            terminalreporter.write_line(line)
