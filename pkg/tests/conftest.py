import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("default")

_acceptance_key = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one line per acceptance criterion; printed in the terminal summary."""
    lines = request.config.stash.setdefault(_acceptance_key, [])

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_acceptance_key, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines, key=lambda x: x[0]):
        terminalreporter.write_line(line)
