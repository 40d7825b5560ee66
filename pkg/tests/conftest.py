import time
from contextlib import contextmanager

# (number, title, passed, seconds, detail) for every acceptance criterion that ran
ACCEPTANCE_RESULTS: list[tuple] = []


@contextmanager
def criterion(number: int, title: str, budget_s: float):
    """Time a criterion, enforce its runtime budget and record a pass/fail line."""
    detail = {}
    start = time.perf_counter()
    passed = False
    try:
        yield detail
        elapsed = time.perf_counter() - start
        detail["budget_s"] = budget_s
        assert elapsed < budget_s, f"criterion {number} took {elapsed:.1f}s (budget {budget_s}s)"
        passed = True
    finally:
        elapsed = time.perf_counter() - start
        line = (number, title, passed, elapsed, detail)
        ACCEPTANCE_RESULTS.append(line)
        print(_format(line), flush=True)


def _format(line) -> str:
    number, title, passed, elapsed, detail = line
    extra = ", ".join(f"{k}={v}" for k, v in detail.items() if k != "budget_s")
    return (f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {elapsed:7.1f}s  {title}"
            + (f"  [{extra}]" if extra else ""))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(_format(line))
