def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, collected from user properties."""
    rows = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call":
                continue
            for key, value in getattr(rep, "user_properties", []):
                if key == "acceptance":
                    rows.append(value)
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(rows):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
