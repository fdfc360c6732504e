import random

import pytest

from iaxkad import KademliaParams

_CRITERIA: list[str] = []


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def small_params():
    return KademliaParams(alpha=3, bits=16, k=4)


@pytest.fixture
def criterion():
    """Report one acceptance criterion: prints a PASS/FAIL line, then asserts."""

    def report(number: int, name: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'}  [{number:2d}] {name}: {detail}"
        _CRITERIA.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda x: x.split("]")[0].split("[")[1].strip().zfill(2)):
            terminalreporter.write_line(line)
