"""Shared test plumbing: an uncaptured report line per acceptance criterion."""


def record_criterion(config, number: int, ok: bool, detail: str) -> None:
    lines = getattr(config, "_criterion_lines", None)
    if lines is None:
        lines = []
        config._criterion_lines = lines
    lines.append((number, f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criterion_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
