from __future__ import annotations

from pathlib import Path

import pytest

from aegis.harness import GovernedUnit
from aegis.iepl import load_charter

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def golden() -> Path:
    return GOLDEN


@pytest.fixture(scope="session")
def charter_min():
    return load_charter(GOLDEN / "charter_min.iepl")


@pytest.fixture
def unit(tmp_path):
    u = GovernedUnit(tmp_path / "unit", fsync=False)
    yield u
    u.close()


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for the acceptance summary, then assert."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        _VERDICTS.append(f"{'PASS' if ok else 'FAIL'}  [{number}] {title}: {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split("[", 1)[1].split("]", 1)[0])):
            terminalreporter.write_line(line)
