import pytest

_LINES = {}


class Criterion:
    """Collects sub-checks for one acceptance criterion and reports a single verdict line."""

    def __init__(self, number, title):
        self.number, self.title = number, title
        self.checks = []

    def check(self, name, ok, detail=""):
        self.checks.append((name, bool(ok), detail))
        return bool(ok)

    @property
    def passed(self):
        return bool(self.checks) and all(ok for _, ok, _ in self.checks)

    def line(self):
        verdict = "PASS" if self.passed else "FAIL"
        parts = "; ".join(f"{n}{'' if ok else ' [FAILED]'}{': ' + d if d else ''}" for n, ok, d in self.checks)
        return f"criterion {self.number:>2} {verdict}  {self.title} ({parts})"

    def finish(self):
        _LINES[self.number] = self.line()
        failed = [f"{n}: {d}" for n, ok, d in self.checks if not ok]
        assert not failed, "; ".join(failed)


@pytest.fixture
def criterion(request, capsys):
    made = []

    def make(number, title):
        c = Criterion(number, title)
        made.append(c)
        return c

    yield make
    for c in made:
        _LINES.setdefault(c.number, c.line())
        with capsys.disabled():
            print("\n" + _LINES[c.number])


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_LINES):
            terminalreporter.write_line(_LINES[k])
