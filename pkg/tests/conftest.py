"""Shared pytest hooks: the acceptance suite reports one line per criterion."""

import re

ACCEPTANCE: dict[str, tuple[str, str]] = {}


def record(label: str, title: str, outcome: str) -> None:
    ACCEPTANCE[str(label)] = (title, outcome)


def _order(label: str):
    m = re.match(r"(\d+)(.*)", label)
    return (int(m.group(1)), m.group(2)) if m else (10**6, label)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(ACCEPTANCE, key=_order):
        title, outcome = ACCEPTANCE[label]
        terminalreporter.write_line(f"criterion {label:>3s}: {outcome:4s}  {title}")
