from pathlib import Path

import pytest

from rkd.config import load_config

FIXTURES = Path(__file__).parent / "fixtures"


def fixture_config(name: str, **changes):
    cfg = load_config(FIXTURES / f"{name}.toml")
    return cfg.replace(**changes) if changes else cfg


@pytest.fixture
def tiny_cfg():
    return fixture_config("tiny")


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
