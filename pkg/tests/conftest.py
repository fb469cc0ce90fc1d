"""Collects one pass/fail line per acceptance criterion and prints them after the run."""
import contextlib

import pytest

_CRITERIA = {}


class _Record:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def criterion():
    """Context manager factory: ``with criterion(6, "ablation direction") as rec: ...``."""

    @contextlib.contextmanager
    def track(number, title):
        rec = _Record()
        try:
            yield rec
        except BaseException:
            _CRITERIA[number] = ("FAIL", title, rec.detail)
            raise
        _CRITERIA[number] = ("PASS", title, rec.detail)

    return track


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[number]
        line = f"[{status}] criterion {number}: {title}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
