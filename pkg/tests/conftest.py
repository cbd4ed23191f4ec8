import re

import pytest

_CRITERIA: dict[str, str] = {}


def _order(key: str):
    num, suffix = re.fullmatch(r"C(\d+)(\w*)", key).groups()
    return int(num), suffix


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion, then assert it."""

    def record(key: str, title: str, ok: bool, detail: str) -> None:
        _CRITERIA[key] = f"{key:<4} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        assert ok, f"{title}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=_order):
        terminalreporter.write_line(_CRITERIA[key])
