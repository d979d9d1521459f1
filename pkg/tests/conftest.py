"""Shared pytest wiring: the release-gate summary table.

`tests/test_acceptance.py` records one verdict per gate criterion while it
runs; after the session this hook prints them as a compact table so the
pass/fail state of every criterion is visible in one place regardless of
how the individual assertions are phrased.
"""

from __future__ import annotations

GATE_RESULTS: dict[int, tuple[str, bool, str]] = {}


def record_criterion(num: int, label: str, ok: bool, detail: str = "") -> None:
    """Register the verdict for one gate criterion (last write wins)."""
    GATE_RESULTS[num] = (label, bool(ok), detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not GATE_RESULTS:
        return
    terminalreporter.section("release gate")
    for num in sorted(GATE_RESULTS):
        label, ok, detail = GATE_RESULTS[num]
        line = f"criterion {num:02d} {'PASS' if ok else 'FAIL'}  {label}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line, green=ok, red=not ok)
