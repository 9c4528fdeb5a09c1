import pytest

CRITERIA: dict[int, tuple[str, bool, str]] = {}


class Criterion:
    """Collects sub-checks for one acceptance criterion and records a verdict line."""

    def __init__(self, number: int, name: str):
        self.number, self.name = number, name
        self.failures: list[str] = []
        self.notes: list[str] = []

    def check(self, ok, detail: str):
        (self.notes if ok else self.failures).append(detail)
        return bool(ok)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            self.failures.append(f"{exc_type.__name__}: {exc}")
        ok = not self.failures
        detail = "; ".join(self.failures if not ok else self.notes)
        CRITERIA[self.number] = (self.name, ok, detail)
        line = f"criterion {self.number:>2} {'PASS' if ok else 'FAIL'}  {self.name}: {detail}"
        print(line)
        if exc_type is None and not ok:
            pytest.fail(line)
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        name, ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
